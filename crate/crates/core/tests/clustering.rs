mod common;

use elsa_core::clustering::{
    affinity, assign_clients, merge_low_trust, spectral_cluster, AffinityMatrix, ClusteringParams, Exclusion,
    SpectralOptions, Topology,
};
use elsa_core::fingerprint::{divergence_matrix, trust_scores, Fingerprint, RidgePolicy};
use nalgebra::DMatrix;
use rand::Rng;

fn two_block_affinity(seed: u64, n: usize, split: usize) -> AffinityMatrix {
    let mut r = common::rng(seed);
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let same = (i < split) == (j < split);
            let v = if same { r.random_range(0.6..1.0) } else { r.random_range(0.0..0.08) };
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    AffinityMatrix { ids: (0..n).collect(), values: w, gamma: 1.0 }
}

#[test]
fn two_way_spectral_matches_brute_force_normalized_cut() {
    for seed in 0..12 {
        let n = 6 + (seed as usize % 3);
        let a = two_block_affinity(seed, n, 2 + seed as usize % 3);
        let opts = SpectralOptions { n_clusters: Some(2), seed, ..Default::default() };
        let got = spectral_cluster(&a, &opts).unwrap();
        assert_eq!(got, common::best_ncut_partition(&a.values), "seed {seed}");
    }
}

#[test]
fn eigengap_finds_the_planted_block_count() {
    let a = two_block_affinity(4, 8, 4);
    let got = spectral_cluster(&a, &SpectralOptions::default()).unwrap();
    assert_eq!(got, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
}

fn planted_fingerprints(n: usize, seed: u64) -> Vec<Fingerprint> {
    let mut r = common::rng(seed);
    (0..n)
        .map(|i| {
            let offset = if i % 2 == 0 { 0.0 } else { 3.0 };
            let t = common::gaussian_matrix(&mut r, 24, 3).add_scalar(offset);
            Fingerprint::from_embeddings(t, RidgePolicy::default()).unwrap()
        })
        .collect()
}

#[test]
fn unreachable_clients_are_excluded_and_the_rest_partitioned() {
    let n = 10;
    let fps = planted_fingerprints(n, 1);
    let r = divergence_matrix(&fps).unwrap();
    let w = trust_scores(&fps, &r, true).unwrap();
    let topo = Topology::generate(n, 2, 200.0, 1e6, &[3, 8], 5).unwrap();
    let params = ClusteringParams { w_min: 0.0, ..Default::default() };
    let asg = assign_clients(&topo, &fps, &w, &r, &params, 9).unwrap();
    assert_eq!(asg.exclusion(3), Some(Exclusion::OutOfRange));
    assert_eq!(asg.exclusion(8), Some(Exclusion::OutOfRange));
    assert_eq!(asg.n_assigned(), 8);
    let mut seen: Vec<usize> = asg.edges.iter().flat_map(|e| e.members.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, vec![0, 1, 2, 4, 5, 6, 7, 9]);
    for e in &asg.edges {
        let mut grouped: Vec<usize> = e.groups.iter().flatten().copied().collect();
        grouped.sort_unstable();
        assert_eq!(grouped, e.members);
        for &c in &e.members {
            assert!(topo.latency[(c, e.edge)] <= topo.tau_max);
        }
    }
}

#[test]
fn low_trust_clusters_merge_into_the_nearest_high_trust_cluster() {
    let fps = planted_fingerprints(6, 2);
    let trust = [0.9, 0.9, 0.05, 0.9, 0.9, 0.05];
    // cluster {2, 5} is low trust; 2 is even (group 0) and 5 is odd, pooled
    // centroid sits between the groups but somewhere definite
    let out = merge_low_trust(&[vec![0, 4], vec![1, 3], vec![2, 5]], &trust, &fps, 0.5).unwrap();
    assert!(out.excluded.is_empty());
    assert_eq!(out.clusters.len(), 2);
    let total: usize = out.clusters.iter().map(|c| c.len()).sum();
    assert_eq!(total, 6);

    let out = merge_low_trust(&[vec![0, 1], vec![2, 3]], &[0.1; 4], &fps, 0.5).unwrap();
    assert!(out.clusters.is_empty());
    assert_eq!(out.excluded, vec![0, 1, 2, 3]);
}

#[test]
fn affinity_rejects_non_positive_gamma() {
    let fps = planted_fingerprints(3, 0);
    let r = divergence_matrix(&fps).unwrap();
    assert!(affinity(&[0, 1, 2], &[1.0; 3], &r, 0.0).unwrap_err().is_config());
}

#[test]
fn two_identical_clients_share_one_cluster() {
    let mut r = common::rng(9);
    let t = common::gaussian_matrix(&mut r, 16, 3);
    let fp = Fingerprint::from_embeddings(t, RidgePolicy::default()).unwrap();
    let fps = vec![fp.clone(), fp];
    let div = divergence_matrix(&fps).unwrap();
    assert_eq!(div.get(0, 1), 0.0);
    let w = trust_scores(&fps, &div, true).unwrap();
    assert_eq!(w[0], w[1]);
    let topo = Topology::new(DMatrix::from_element(2, 1, 10.0), 200.0, 1e6).unwrap();
    let asg = assign_clients(&topo, &fps, &w, &div, &ClusteringParams::default(), 0).unwrap();
    assert!(asg.excluded.is_empty());
    assert_eq!(asg.edge_of, vec![Some(0), Some(0)]);
    assert_eq!(asg.edges[0].groups, vec![vec![0, 1]]);
}
