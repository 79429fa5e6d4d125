mod common;

use stmn::ddi::{self_attention, DdiStructure, SelfAttentionParams};
use stmn::numerics::{ParamStore, Tape};
use stmn::stm::{argmax, mask_from_map, top_k};

#[test]
fn dependency_graphs_and_eigenpairs() {
    common::check_graph_invariants(1000, 200).unwrap();
}

#[test]
fn graph_attention_normalizes_per_destination() {
    common::check_graph_softmax(2000, 100).unwrap();
}

#[test]
fn decoder_distributions_and_masks() {
    common::check_decoder_invariants(3000, 24).unwrap();
}

#[test]
fn top_k_breaks_ties_toward_lower_index() {
    assert_eq!(top_k(&[0.5, 0.9, 0.5, 0.9, 0.1], 3), vec![0, 1, 3]);
    assert_eq!(top_k(&[1.0, 1.0], 5), vec![0, 1]);
    assert_eq!(argmax(&[2.0, 3.0, 3.0]), 1);
}

#[test]
fn mask_keeps_global_slot_open_when_map_is_silent() {
    let map = vec![0.1, 0.2, 0.3, 0.9, 0.0, 0.4];
    let open = mask_from_map(&map, 3, &[0, 2], 0.5);
    assert_eq!(open, vec![false, false, true, true, false, true]);
}

#[test]
fn self_attention_keeps_node_shape() {
    let mut r = common::rng(17);
    let d = 4;
    let mut store = ParamStore::new();
    let ids: Vec<_> = (0..4).map(|i| store.insert(format!("w{i}"), common::tensor(&common::rand_mat(d, d, &mut r)))).collect();
    let p = SelfAttentionParams { q: ids[0], k: ids[1], v: ids[2], o: ids[3] };
    let mut tape = Tape::new();
    let h = tape.constant(6, d, common::flat(&common::rand_mat(6, d, &mut r))).unwrap();
    let out = self_attention(&mut tape, &store, h, &p, 2).unwrap();
    assert_eq!(tape.dims(out), (6, d));
}

#[test]
fn every_structure_runs_the_micro_problem() {
    let micro = stmn::harness::gradcheck::micro_instance(5).unwrap();
    for s in DdiStructure::ALL {
        let model = stmn::model::Model::new(stmn::harness::gradcheck::micro_config(s), micro.vocab.clone(), 5).unwrap();
        let mut tape = Tape::new();
        let sp = model.encode_scene(&mut tape, &micro.scene).unwrap();
        let out = model.decode(&mut tape, sp, &micro.expr, None).unwrap();
        assert_eq!(tape.dims(out.map), (1, micro.scene.partition.count()));
        let score = tape.scalar(out.score);
        assert!(score > 0.0 && score < 1.0);
        assert_eq!(out.rounds.len(), 2);
    }
}
