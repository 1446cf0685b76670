mod common;

#[test]
fn single_expert_tracks_plain_ffn_bitwise() {
    assert_eq!(common::single_expert_divergence(25), None);
}
