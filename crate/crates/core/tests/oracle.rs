use vsemb::datamodel::{generate_synthetic, InputKind, SynthConfig, Synthetic};
use vsemb::mixture::{best_assignment, PiEmbedding};
use vsemb::oracle::{
    build_oracle, oracle_codebook, oracle_pi, oracle_pi_batch, OracleConfig, OracleKind,
    VisualOracle,
};
use vsemb::potentials::predict_visual;
use vsemb::trainer::{train, Mode, Supervision, TrainConfig};

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// For each oracle row, the planted part and type map that best explain its
/// argmax assignments, plus the fraction of instances that disagree.
fn align(s: &Synthetic, pis: &[PiEmbedding]) -> Vec<(usize, Vec<usize>, f64)> {
    let (m_parts, k) = (s.planted.parts, s.planted.types);
    let n = pis.len();
    (0..pis[0].parts())
        .map(|b| {
            (0..m_parts)
                .map(|m| {
                    let mut counts = vec![vec![0.0; k]; k];
                    for (pi, types) in pis.iter().zip(&s.type_labels) {
                        counts[types[m]][argmax(pi.row(b))] += 1.0;
                    }
                    let cost: Vec<Vec<f64>> = counts
                        .iter()
                        .map(|r| r.iter().map(|c| -c).collect())
                        .collect();
                    let map = best_assignment(&cost);
                    let hits: f64 = map.iter().enumerate().map(|(t, &o)| counts[t][o]).sum();
                    (m, map, 1.0 - hits / n as f64)
                })
                .min_by(|a, b| a.2.total_cmp(&b.2))
                .unwrap()
        })
        .collect()
}

fn oracle(s: &Synthetic, seed: u64) -> VisualOracle {
    let cfg = OracleConfig {
        types: s.planted.types,
        seed,
        ..Default::default()
    };
    build_oracle(&s.dataset, &cfg, "synthetic").unwrap()
}

#[test]
fn zero_noise_argmax_follows_one_permutation() {
    let s = generate_synthetic(&SynthConfig {
        noise: 0.0,
        ..Default::default()
    })
    .unwrap();
    let o = oracle(&s, 1);
    let all: Vec<_> = s.dataset.instances().iter().collect();
    let pis = oracle_pi_batch(&o, &all).unwrap();
    let alignment = align(&s, &pis);
    let mut parts: Vec<usize> = alignment.iter().map(|a| a.0).collect();
    parts.sort();
    assert_eq!(parts, (0..s.planted.parts).collect::<Vec<_>>());
    for (b, (_, _, miss)) in alignment.iter().enumerate() {
        assert_eq!(*miss, 0.0, "row {b}");
    }
}

#[test]
fn class_signatures_are_distinct_and_match_type_frequencies() {
    let s = generate_synthetic(&SynthConfig::default()).unwrap();
    let o = oracle(&s, 1);
    let book = oracle_codebook(&o, &s.dataset, s.dataset.classes()).unwrap();
    let classes = s.dataset.classes();
    for (i, &a) in classes.iter().enumerate() {
        for &b in &classes[i + 1..] {
            let d: f64 = book
                .get(a)
                .unwrap()
                .iter()
                .zip(book.get(b).unwrap())
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            assert!(d > 0.0, "classes {a} and {b}");
        }
    }

    let all: Vec<_> = s.dataset.instances().iter().collect();
    let pis = oracle_pi_batch(&o, &all).unwrap();
    let k = s.planted.types;
    for (b, (m, map, _)) in align(&s, &pis).into_iter().enumerate() {
        for &y in classes {
            let members: Vec<usize> = (0..all.len()).filter(|&i| all[i].class == y).collect();
            for t in 0..k {
                let freq = members
                    .iter()
                    .filter(|&&i| s.type_labels[i][m] == t)
                    .count() as f64
                    / members.len() as f64;
                let got = book.get(y).unwrap()[b * k + map[t]];
                assert!(
                    (got - freq).abs() < 0.05,
                    "class {y} row {b} type {t}: {got} vs {freq}"
                );
            }
        }
    }
}

#[test]
fn large_sample_signatures_approach_planted_distributions() {
    let cfg = SynthConfig {
        emit: InputKind::PartSet,
        per_class: 2000,
        ..Default::default()
    };
    let s = generate_synthetic(&cfg).unwrap();
    let o = build_oracle(
        &s.dataset,
        &OracleConfig {
            types: s.planted.types,
            epochs: 0,
            ..Default::default()
        },
        "synthetic",
    )
    .unwrap();
    let book = oracle_codebook(&o, &s.dataset, s.dataset.classes()).unwrap();
    let all: Vec<_> = s.dataset.instances().iter().collect();
    let pis = oracle_pi_batch(&o, &all).unwrap();
    let k = s.planted.types;
    for (b, (m, map, _)) in align(&s, &pis).into_iter().enumerate() {
        assert_eq!(m, b, "part sets keep part order");
        for &y in s.dataset.classes() {
            for t in 0..k {
                let want = s.planted.q[y][m * k + t];
                let got = book.get(y).unwrap()[b * k + map[t]];
                assert!(
                    (got - want).abs() < 0.05,
                    "class {y} part {m} type {t}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn reseeded_oracle_induces_the_same_partition() {
    let s = generate_synthetic(&SynthConfig {
        noise: 0.0,
        ..Default::default()
    })
    .unwrap();
    let classes = s.dataset.classes();
    let predictions = |o: &VisualOracle| -> Vec<usize> {
        let book = oracle_codebook(o, &s.dataset, classes).unwrap();
        let entries = book.scoring_entries(false);
        s.dataset
            .instances()
            .iter()
            .map(|i| predict_visual(oracle_pi(o, &i.input).unwrap().values(), &entries).unwrap())
            .collect()
    };
    let (a, b) = (oracle(&s, 1), oracle(&s, 2));
    assert_ne!(a.mixture, b.mixture);
    let (pa, pb) = (predictions(&a), predictions(&b));
    let agree = pa.iter().zip(&pb).filter(|(x, y)| x == y).count() as f64 / pa.len() as f64;
    assert!(agree >= 0.99, "{agree}");
}

#[test]
fn flat_oracle_outputs_sum_to_one() {
    let s = generate_synthetic(&SynthConfig {
        per_class: 10,
        ..Default::default()
    })
    .unwrap();
    let cfg = OracleConfig {
        kind: OracleKind::Flat,
        types: 8,
        epochs: 1,
        ..Default::default()
    };
    let o = build_oracle(&s.dataset, &cfg, "synthetic").unwrap();
    for i in s.dataset.instances() {
        let pi = oracle_pi(&o, &i.input).unwrap();
        assert!(pi.is_flat());
        assert!((pi.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(pi.values().iter().all(|v| *v >= 0.0));
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn learner_checkpoint_holds_no_oracle_parameters() {
    let s = generate_synthetic(&SynthConfig {
        per_class: 10,
        ..Default::default()
    })
    .unwrap();
    let o = oracle(&s, 1);
    let cfg = TrainConfig {
        mode: Mode::Visual,
        epochs: 2,
        ..Default::default()
    };
    let bytes = train(&s.dataset, &cfg, Supervision::Oracle(&o))
        .unwrap()
        .to_bytes();
    let mut probes: Vec<Vec<f64>> = o
        .mixture
        .parts
        .iter()
        .flat_map(|p| p.prototypes.clone())
        .collect();
    let g = o.grouping.as_ref().unwrap();
    probes.extend(g.weight.chunks(g.channels()).map(<[f64]>::to_vec));
    for p in probes {
        let raw: Vec<u8> = p.iter().flat_map(|v| v.to_le_bytes()).collect();
        assert!(!contains(&bytes, &raw));
    }
    assert!(!contains(&bytes, b"oracle"));
}
