use std::collections::HashSet;
use std::fmt::Write as _;

use gridrun_core::config::parse_config;
use gridrun_core::pipeline::{
    generate_pipelines, load_pipelines, persist_pipelines, pipeline_count, pipeline_json,
};
use proptest::prelude::*;

/// One section: its name and, per parameter, the listed integer values.
type Section = (String, Vec<Vec<i64>>);

/// Stage types in slot order, each with its sections.
fn arb_layout() -> impl Strategy<Value = Vec<Vec<Section>>> {
    let values = prop::collection::btree_set(-50i64..50, 1..4).prop_map(|s| s.into_iter().collect());
    let params = prop::collection::vec(values, 0..3);
    let sections = prop::collection::vec(params, 1..3);
    prop::collection::vec(sections, 1..4).prop_map(|types| {
        types
            .into_iter()
            .enumerate()
            .map(|(t, secs)| {
                secs.into_iter()
                    .enumerate()
                    .map(|(s, ps)| (format!("s{t}_{s}"), ps))
                    .collect()
            })
            .collect()
    })
}

fn render_ini(layout: &[Vec<Section>]) -> String {
    let types: Vec<String> = (0..layout.len()).map(|t| format!("t{t}")).collect();
    let mut ini = format!("[PROCESS]\nepochs = 5\npipeline_scheme = {}\n\n[MONITOR]\n", types.join(", "));
    for (t, secs) in layout.iter().enumerate() {
        for (name, params) in secs {
            writeln!(ini, "\n[{name}]\ntype = t{t}\nclass = c{t}").unwrap();
            for (i, vs) in params.iter().enumerate() {
                let list: Vec<String> = vs.iter().map(i64::to_string).collect();
                writeln!(ini, "p{i} = {}", list.join(", ")).unwrap();
            }
        }
    }
    ini
}

/// Nested loops over slots, sections and parameter values.
fn brute_force_labels(layout: &[Vec<Section>]) -> Vec<String> {
    fn section_labels(name: &str, params: &[Vec<i64>], prefix: Vec<i64>, out: &mut Vec<String>) {
        match params.split_first() {
            None => {
                let vs: Vec<String> = prefix.iter().map(i64::to_string).collect();
                out.push(format!("{name}({})", vs.join(",")));
            }
            Some((first, rest)) => {
                for v in first {
                    let mut p = prefix.clone();
                    p.push(*v);
                    section_labels(name, rest, p, out);
                }
            }
        }
    }
    let mut acc = vec![String::new()];
    for secs in layout {
        let mut options = Vec::new();
        for (name, params) in secs {
            section_labels(name, params, Vec::new(), &mut options);
        }
        acc = acc
            .iter()
            .flat_map(|head| {
                options.iter().map(move |o| {
                    if head.is_empty() {
                        o.clone()
                    } else {
                        format!("{head}|{o}")
                    }
                })
            })
            .collect();
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expansion_matches_nested_loops(layout in arb_layout()) {
        let cfg = parse_config(&render_ini(&layout)).unwrap();
        let ps = generate_pipelines(&cfg).unwrap();
        let expected = brute_force_labels(&layout);
        let labels: Vec<String> = ps.iter().map(|p| p.label.clone()).collect();
        prop_assert_eq!(&labels, &expected);
        prop_assert_eq!(pipeline_count(&cfg), expected.len() as u128);
        let hashes: HashSet<&str> = ps.iter().map(|p| p.hash.as_str()).collect();
        prop_assert_eq!(hashes.len(), ps.len());
    }

    #[test]
    fn generation_is_byte_deterministic(layout in arb_layout()) {
        let text = render_ini(&layout);
        let a = generate_pipelines(&parse_config(&text).unwrap()).unwrap();
        let b = generate_pipelines(&parse_config(&text).unwrap()).unwrap();
        let ja: Vec<String> = a.iter().map(pipeline_json).collect();
        let jb: Vec<String> = b.iter().map(pipeline_json).collect();
        prop_assert_eq!(ja, jb);
    }
}

#[test]
fn reference_sweep_persists_and_reloads() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/reference_sweep.ini")).unwrap();
    let cfg = parse_config(&text).unwrap();
    let ps = generate_pipelines(&cfg).unwrap();
    assert_eq!(ps.len(), 576);
    let dir = tempfile::tempdir().unwrap();
    let manifest = persist_pipelines(dir.path(), &ps).unwrap();
    assert_eq!(manifest.len(), 576);
    let back = load_pipelines(dir.path()).unwrap();
    assert_eq!(back, ps);

    // Rewriting gives the same files.
    let first = std::fs::read(dir.path().join(format!("{}.json", ps[0].hash))).unwrap();
    persist_pipelines(dir.path(), &ps).unwrap();
    assert_eq!(std::fs::read(dir.path().join(format!("{}.json", ps[0].hash))).unwrap(), first);
}

#[test]
fn tampered_file_is_rejected() {
    let cfg = parse_config("[PROCESS]\npipeline_scheme = m\n\n[MONITOR]\n\n[a]\ntype = m\nclass = c\nx = 1, 2\n").unwrap();
    let ps = generate_pipelines(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    persist_pipelines(dir.path(), &ps).unwrap();
    let path = dir.path().join(format!("{}.json", ps[1].hash));
    let text = std::fs::read_to_string(&path).unwrap().replace("\"x\": 2", "\"x\": 3");
    std::fs::write(&path, text).unwrap();
    assert!(load_pipelines(dir.path()).is_err());
}
