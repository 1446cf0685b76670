use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bandflow::checkpoint;
use bandflow::flow::{euler_sample, write_trace_csv, FlowConfig, MlpField};
use bandflow::gradcheck::run_suite;
use bandflow::harness::accomp::{
    evaluate_accomp, generate, global_alpha_profile, route_trace as accomp_routes, train_accomp, AccompConfig,
    AccompModel, AccompSettings,
};
use bandflow::harness::config::{KvConfig, ModelKind, RunConfig, SynthConfig};
use bandflow::harness::flow2d::{sample_flow2d, train_flow2d, Flow2dSettings, MixtureStats};
use bandflow::harness::melody_task::{evaluate_melody, init_melody, song_input, train_melody, MelodySettings};
use bandflow::harness::style::{train_style, style_eval_loss, StyleField, StylePredictor, StylePrompt, StyleSettings};
use bandflow::harness::synth::{
    gen_flow2d, gen_melody_songs, gen_style_samples, gen_toy_pairs, write_pairs_csv, write_points_csv, write_style_csv,
    ToyConfig,
};
use bandflow::harness::write_loss_csv;
use bandflow::melody::MelodyModel;
use bandflow::metrics::{evaluate_song, f0_frame_error, read_f0_csv, summarize, KeyProfiles, MelodyReport, SongMetrics};
use bandflow::moe::write_route_csv;
use bandflow::notes::NoteSequence;
use bandflow::{Error, ParameterStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::Failure;

type Res = Result<(), Failure>;

/// File that `train` leaves next to the checkpoint so later commands can
/// rebuild the same model.
const RUN_FILE: &str = "run.cfg";
const SAMPLE_COUNT: usize = 2000;
const TRACE_TIMES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
/// Extra style samples drawn after the training set, from the same tables.
const STYLE_HELD_OUT: usize = 16;

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(Error::from)?))
}

fn run_config(kv: &KvConfig) -> Result<RunConfig, Failure> {
    RunConfig::from_kv(kv).map_err(usage)
}

/// Settings for commands that read a checkpoint: the `run.cfg` saved beside
/// it, then the given settings on top.
fn saved_run_config(kv: &KvConfig) -> Result<RunConfig, Failure> {
    let out = kv.get_str("out").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
    let ckpt = kv.get_str("checkpoint").map(PathBuf::from).unwrap_or_else(|| out.join("model.vbnd"));
    let saved = ckpt.parent().unwrap_or(Path::new(".")).join(RUN_FILE);
    let mut merged = if saved.exists() {
        KvConfig::read(&saved).map_err(usage)?
    } else {
        KvConfig::default()
    };
    for k in kv.keys() {
        merged.set(k, kv.get_str(k).unwrap_or_default());
    }
    run_config(&merged)
}

fn flow_of(rc: &RunConfig) -> FlowConfig {
    let mut f = FlowConfig::default();
    if let Some(g) = rc.gamma {
        f.cfg_scale = g;
    }
    if let Some(n) = rc.infer_steps {
        f.infer_steps = n;
    }
    f
}

fn flow2d_settings(rc: &RunConfig) -> Flow2dSettings {
    let d = Flow2dSettings::default();
    Flow2dSettings {
        seed: rc.seed,
        steps: rc.steps.unwrap_or(d.steps),
        batch: rc.batch.unwrap_or(d.batch),
        lr: rc.lr.unwrap_or(d.lr),
        train_size: rc.train_size.unwrap_or(d.train_size),
        model: bandflow::flow::MlpConfig {
            hidden: rc.width.unwrap_or(d.model.hidden),
            ..d.model.clone()
        },
        flow: flow_of(rc),
        ..d
    }
}

fn accomp_settings(rc: &RunConfig) -> AccompSettings {
    let d = AccompSettings::default();
    let mut model = AccompConfig::default();
    if let Some(w) = rc.width {
        model.width = w;
        model.hidden = 2 * w;
    }
    if let Some(f) = rc.frames {
        model.frames = f;
    }
    if let Some(n) = rc.experts {
        model.experts = n;
    }
    AccompSettings {
        seed: rc.seed,
        model,
        steps: rc.steps.unwrap_or(d.steps),
        batch: rc.batch.unwrap_or(d.batch),
        lr: rc.lr.unwrap_or(d.lr),
        train_size: rc.train_size.unwrap_or(d.train_size),
        test_size: rc.test_size.unwrap_or(d.test_size),
        flow: flow_of(rc),
        ..d
    }
}

fn melody_settings(rc: &RunConfig) -> MelodySettings {
    let d = MelodySettings::default();
    let mut model = d.model.clone();
    if let Some(w) = rc.width {
        model.width = w;
        model.hidden = 2 * w;
    }
    MelodySettings {
        seed: rc.seed,
        model,
        steps: rc.steps.unwrap_or(d.steps),
        batch: rc.batch.unwrap_or(d.batch),
        lr: rc.lr.unwrap_or(d.lr),
        train_size: rc.train_size.unwrap_or(d.train_size),
        test_size: rc.test_size.unwrap_or(d.test_size),
    }
}

fn style_settings(rc: &RunConfig) -> StyleSettings {
    let d = StyleSettings::default();
    let mut model = d.model.clone();
    if let Some(w) = rc.width {
        model.width = w;
    }
    StyleSettings {
        seed: rc.seed,
        model,
        steps: rc.steps.unwrap_or(d.steps),
        warmup: rc.warmup,
        batch: rc.batch.unwrap_or(d.batch),
        lr: rc.lr.unwrap_or(d.lr),
        train_size: rc.train_size.unwrap_or(d.train_size),
        flow: flow_of(rc),
        ..d
    }
}

/// Values of `store` copied into `target`, requiring the same tensor set.
fn restore(target: &mut ParameterStore<f64>, store: &ParameterStore<f64>) -> Res {
    if target.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            store.len(),
            target.len()
        ))
        .into());
    }
    target.load_values(store)?;
    Ok(())
}

fn write_losses(dir: &Path, losses: &[f64]) -> Res {
    write_loss_csv(losses, create(&dir.join("losses.csv"))?)?;
    Ok(())
}

pub fn gen_data(kv: &KvConfig) -> Res {
    let sc = SynthConfig::from_kv(kv).map_err(usage)?;
    let out = PathBuf::from(kv.get_str("out").unwrap_or("out"));
    fs::create_dir_all(&out).map_err(Error::from)?;
    match sc.task {
        ModelKind::Flow2d => {
            let pts = gen_flow2d(sc.seed, sc.size)?;
            write_points_csv(&pts, create(&out.join("points.csv"))?)?;
        }
        ModelKind::Accomp => {
            let cfg = ToyConfig {
                tags: sc.tags,
                ..ToyConfig::default()
            };
            let pairs = gen_toy_pairs(sc.seed, sc.size, &cfg)?;
            write_pairs_csv(&pairs, create(&out.join("pairs.csv"))?)?;
        }
        ModelKind::Melody => {
            let songs = gen_melody_songs(sc.seed, sc.size);
            let dir = out.join("songs");
            fs::create_dir_all(&dir).map_err(Error::from)?;
            songs
                .par_iter()
                .enumerate()
                .try_for_each(|(i, s)| s.notes.write(dir.join(format!("{i:04}.notes"))))?;
            let mut w = create(&out.join("keys.csv"))?;
            writeln!(w, "song,key").map_err(Error::from)?;
            for (i, s) in songs.iter().enumerate() {
                writeln!(w, "{i:04},{}", s.key).map_err(Error::from)?;
            }
            w.flush().map_err(Error::from)?;
        }
        ModelKind::Style => {
            let samples = gen_style_samples(sc.seed, sc.size, &Default::default())?;
            write_style_csv(&samples, create(&out.join("style.csv"))?)?;
        }
    }
    println!("wrote {} {} items to {}", sc.size, sc.task, out.display());
    Ok(())
}

pub fn train(kv: &KvConfig) -> Res {
    let rc = run_config(kv)?;
    let out = rc.out.clone();
    fs::create_dir_all(&out).map_err(Error::from)?;
    let ckpt = rc.checkpoint_path();
    fs::write(out.join(RUN_FILE), rc.to_text()).map_err(Error::from)?;
    match rc.model {
        ModelKind::Flow2d => {
            let s = flow2d_settings(&rc);
            let mut run = train_flow2d::<f64>(&s)?;
            checkpoint::save(&run.model.store, &ckpt)?;
            run.model.store.load_values(&load_store(&ckpt)?)?;
            write_losses(&out, &run.losses)?;
            let pts = sample_flow2d(&run.model, SAMPLE_COUNT, s.seed.wrapping_add(2), &s.flow)?;
            let m = MixtureStats::of(&pts);
            println!(
                "flow2d: right mean {:?} left mean {:?} right weight {:.3}",
                m.right_mean, m.left_mean, m.right_weight
            );
        }
        ModelKind::Accomp => {
            let s = accomp_settings(&rc);
            s.model.validate().map_err(usage)?;
            let mut run = train_accomp::<f64>(&s)?;
            checkpoint::save(&run.model.store, &ckpt)?;
            run.model.store.load_values(&load_store(&ckpt)?)?;
            write_losses(&out, &run.losses)?;
            let (_, test) = s.datasets()?;
            let routes = accomp_routes(&run.model, &test[0], &TRACE_TIMES, s.seed)?;
            let route_path = rc.trace.clone().unwrap_or_else(|| out.join("route.csv"));
            write_route_csv(&routes, create(&route_path)?)?;
            let mut w = create(&out.join("eval.csv"))?;
            writeln!(w, "gamma,pearson,tag_consistency").map_err(Error::from)?;
            for gamma in [1.0, s.flow.cfg_scale] {
                let e = evaluate_accomp(&run.model, &test, &s.flow, gamma, s.seed)?;
                writeln!(w, "{},{},{}", e.gamma, e.pearson, e.tag_consistency).map_err(Error::from)?;
                println!("accomp: gamma {} pearson {:.4} tag consistency {:.3}", e.gamma, e.pearson, e.tag_consistency);
            }
            w.flush().map_err(Error::from)?;
            let (early, late) = global_alpha_profile(&run.model, &test, s.seed)?;
            println!("accomp: aligned global weight early {early:.3} late {late:.3}");
        }
        ModelKind::Melody => {
            let s = melody_settings(&rc);
            let mut run = train_melody::<f64>(&s)?;
            checkpoint::save(&run.model.store, &ckpt)?;
            run.model.store.load_values(&load_store(&ckpt)?)?;
            write_losses(&out, &run.losses)?;
            let (_, test) = s.datasets();
            let ev = evaluate_melody(&run.model, &test, s.seed)?;
            let mut w = create(&out.join("report.csv"))?;
            writeln!(w, "song,{}", MelodyReport::csv_header()).map_err(Error::from)?;
            for (i, m) in ev.songs.iter().enumerate() {
                writeln!(w, "{i:04},{}", song_row(m)).map_err(Error::from)?;
            }
            writeln!(w, "mean,{}", ev.report.csv_row()).map_err(Error::from)?;
            w.flush().map_err(Error::from)?;
            println!(
                "melody: pitch accuracy {:.4} KA {:.4} (random baseline {:.4})",
                ev.accuracy, ev.report.ka, ev.baseline_ka
            );
        }
        ModelKind::Style => {
            let s = style_settings(&rc);
            let run = train_style::<f64>(&s)?;
            checkpoint::save(&run.model.checkpoint_store()?, &ckpt)?;
            write_losses(&out, &run.losses)?;
            let model = StylePredictor::<f64>::from_checkpoint(s.model.clone(), &load_store(&ckpt)?)?;
            let held = style_held_out(&s)?;
            let l = style_eval_loss(&model, &held, held.len(), &s.flow, s.seed)?;
            println!("style: held-out flow loss {l:.5}");
        }
    }
    // reports above come from the reloaded checkpoint, so they can be reproduced from it
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn style_held_out(s: &StyleSettings) -> Result<Vec<bandflow::harness::synth::StyleSample>, Failure> {
    let all = gen_style_samples(s.seed, s.train_size + STYLE_HELD_OUT, &s.model.toy)?;
    Ok(all[s.train_size..].to_vec())
}

fn load_store(path: &Path) -> Result<ParameterStore<f64>, Failure> {
    checkpoint::load::<f64>(path).map_err(|e| match e {
        Error::Io(io) => Error::Format(format!("{}: {io}", path.display())).into(),
        other => other.into(),
    })
}

fn load_accomp(rc: &RunConfig) -> Result<(AccompSettings, AccompModel<f64>), Failure> {
    let s = accomp_settings(rc);
    let store = load_store(&rc.checkpoint_path())?;
    let model = AccompModel::from_store(s.model.clone(), &store)?;
    Ok((s, model))
}

pub fn sample(kv: &KvConfig) -> Res {
    let rc = saved_run_config(kv)?;
    let out = rc.out.clone();
    let path = out.join("samples.csv");
    let store = load_store(&rc.checkpoint_path())?;
    match rc.model {
        ModelKind::Flow2d => {
            let s = flow2d_settings(&rc);
            let mut model = MlpField::<f64>::new(s.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
            restore(&mut model.store, &store)?;
            let n = rc.test_size.unwrap_or(SAMPLE_COUNT);
            let mut trace = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(2));
            let x0 = Tensor::randn(&[n, 2], &mut rng);
            let pts = bandflow::flow::euler_sample_from(&model, &x0, None, &s.flow, 0.0, Some(&mut trace))?;
            write_points_csv(&pts, create(&path)?)?;
            if let Some(t) = &rc.trace {
                write_trace_csv(&trace, create(t)?)?;
            }
            let m = MixtureStats::of(&pts);
            println!("flow2d: right mean {:?} left mean {:?} right weight {:.3}", m.right_mean, m.left_mean, m.right_weight);
        }
        ModelKind::Accomp => {
            let (s, model) = load_accomp(&rc)?;
            let (_, test) = s.datasets()?;
            let mut w = create(&path)?;
            writeln!(w, "pair,tag,frame,channel,value").map_err(Error::from)?;
            let mut trace = Vec::new();
            for (i, p) in test.iter().enumerate() {
                let tr = (i == 0).then_some(&mut trace);
                let g = generate(&model, p, &s.flow, s.seed.wrapping_add(i as u64), tr)?;
                for f in 0..g.rows() {
                    for c in 0..g.cols() {
                        writeln!(w, "{i},{},{f},{c},{}", p.tag, g.at(f, c)).map_err(Error::from)?;
                    }
                }
            }
            w.flush().map_err(Error::from)?;
            if let Some(t) = &rc.trace {
                write_trace_csv(&trace, create(t)?)?;
            }
            println!("accomp: {} samples at gamma {}", test.len(), s.flow.cfg_scale);
        }
        ModelKind::Melody => {
            let s = melody_settings(&rc);
            let mut model: MelodyModel<f64> = init_melody(&s)?;
            restore(&mut model.store, &store)?;
            let (_, test) = s.datasets();
            let (gen_dir, ref_dir) = (out.join("generated"), out.join("reference"));
            fs::create_dir_all(&gen_dir).map_err(Error::from)?;
            fs::create_dir_all(&ref_dir).map_err(Error::from)?;
            test.par_iter().enumerate().try_for_each(|(i, song)| -> Result<(), Error> {
                let name = format!("{i:04}.notes");
                model.predict(&song_input(song), song.notes.tempo)?.write(gen_dir.join(&name))?;
                song.notes.write(ref_dir.join(&name))
            })?;
            println!("melody: {} songs under {}", test.len(), out.display());
        }
        ModelKind::Style => {
            let s = style_settings(&rc);
            let model = StylePredictor::<f64>::from_checkpoint(s.model.clone(), &store)?;
            let held = style_held_out(&s)?;
            let mut w = create(&path)?;
            writeln!(w, "sample,tag,phoneme,channel,value").map_err(Error::from)?;
            let mut trace = Vec::new();
            for (i, smp) in held.iter().enumerate() {
                let field = StyleField {
                    model: &model,
                    content: smp.content.clone(),
                };
                let cond = StylePrompt {
                    prompt: Some(smp.prompt.clone()),
                    tag: Some(smp.tag),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(i as u64));
                let x0 = Tensor::randn(smp.target.shape(), &mut rng);
                let g = if i == 0 {
                    bandflow::flow::euler_sample_from(&field, &x0, Some(&cond), &s.flow, 0.0, Some(&mut trace))?
                } else {
                    euler_sample(&field, &x0, Some(&cond), &s.flow)?
                };
                for p in 0..g.rows() {
                    for c in 0..g.cols() {
                        writeln!(w, "{i},{},{p},{c},{}", smp.tag, g.at(p, c)).map_err(Error::from)?;
                    }
                }
            }
            w.flush().map_err(Error::from)?;
            if let Some(t) = &rc.trace {
                write_trace_csv(&trace, create(t)?)?;
            }
            println!("style: {} samples", held.len());
        }
    }
    println!("samples {}", path.display());
    Ok(())
}

fn song_row(m: &SongMetrics) -> String {
    let ka = m.ka.map(|v| v.to_string()).unwrap_or_default();
    format!("{ka},{},{},{},{},{}", m.apd, m.td, m.pd, m.dd, m.md)
}

/// `(name, generated, reference)` triples: one pair of files, or the files
/// present under both directories.
fn note_pairs(gen: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, Failure> {
    match (gen.is_dir(), gt.is_dir()) {
        (false, false) => {
            let name = gen.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(vec![(name, gen.to_path_buf(), gt.to_path_buf())])
        }
        (true, true) => {
            let mut names: Vec<_> = fs::read_dir(gen)
                .map_err(Error::from)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file() && gt.join(p.file_name().unwrap_or_default()).is_file())
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(Failure::Usage(format!(
                    "no file names shared by {} and {}",
                    gen.display(),
                    gt.display()
                )));
            }
            Ok(names
                .into_iter()
                .map(|p| {
                    let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    let other = gt.join(p.file_name().unwrap_or_default());
                    (name, p, other)
                })
                .collect())
        }
        _ => Err(Failure::Usage("eval-melody takes two files or two directories".into())),
    }
}

pub fn eval_melody(gen: &Path, gt: &Path, out: Option<&Path>) -> Res {
    let pairs = note_pairs(gen, gt)?;
    let profiles = KeyProfiles::standard();
    let metrics = pairs
        .par_iter()
        .map(|(_, g, r)| evaluate_song(&NoteSequence::read(g)?, &NoteSequence::read(r)?, None, &profiles))
        .collect::<Result<Vec<_>, Error>>()?;
    let report = summarize(&metrics)?;
    let mut text = format!("song,{}\n", MelodyReport::csv_header());
    for ((name, _, _), m) in pairs.iter().zip(&metrics) {
        text.push_str(&format!("{name},{}\n", song_row(m)));
    }
    text.push_str(&format!("mean,{}\n", report.csv_row()));
    print!("{text}");
    if let Some(p) = out {
        create(p)?.write_all(text.as_bytes()).map_err(Error::from)?;
    }
    Ok(())
}

pub fn eval_f0(gen: &Path, gt: &Path) -> Res {
    let ffe = f0_frame_error(&read_f0_csv(gen)?, &read_f0_csv(gt)?)?;
    println!("FFE={ffe}");
    Ok(())
}

pub fn route_trace(kv: &KvConfig) -> Res {
    let rc = saved_run_config(kv)?;
    if rc.model != ModelKind::Accomp {
        return Err(Failure::Usage(format!("route-trace needs an accomp checkpoint, not {}", rc.model)));
    }
    let (s, model) = load_accomp(&rc)?;
    let (_, test) = s.datasets()?;
    let rows = accomp_routes(&model, &test[0], &TRACE_TIMES, s.seed)?;
    let path = rc.trace.clone().unwrap_or_else(|| rc.out.join("route.csv"));
    write_route_csv(&rows, create(&path)?)?;
    println!("{} routing rows to {}", rows.len(), path.display());
    Ok(())
}

pub fn gradcheck(kv: &KvConfig) -> Res {
    let seed = kv.get("seed").map_err(usage)?.unwrap_or(0);
    let reports = run_suite(seed, 20)?;
    println!("op,cases,worst_rel_err");
    let mut worst = 0.0f64;
    for r in &reports {
        println!("{},{},{:.3e}", r.op, r.cases, r.worst_rel_err);
        worst = worst.max(r.worst_rel_err);
    }
    if worst >= 1e-4 {
        return Err(Error::InvalidMetric(format!("gradient check failed: worst relative error {worst:.3e}")).into());
    }
    Ok(())
}
