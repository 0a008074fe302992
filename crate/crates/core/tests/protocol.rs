use gridrun_core::indicators::LossCurve;
use gridrun_core::protocol::{
    command_line, curve_csv, parse_command_line, parse_curve, parse_event_line, read_curve, rows_to_curve,
    write_curve, Command, SessionValidator, WorkerEvent,
};
use gridrun_core::trainer::{Checkpoint, MlpModel, TrainState, CHECKPOINT_FORMAT};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        1e-300f64..1e300,
        Just(0.0),
    ]
}

fn arb_curve() -> impl Strategy<Value = LossCurve> {
    (1usize..40).prop_flat_map(|n| {
        (prop::collection::vec(finite(), n), prop::collection::vec(finite(), n))
            .prop_map(|(train, test)| LossCurve { train, test })
    })
}

fn epoch(e: u32, a: f64, b: f64) -> WorkerEvent {
    WorkerEvent::Epoch {
        epoch: e,
        train_loss: a,
        test_loss: b,
    }
}

fn done() -> WorkerEvent {
    WorkerEvent::Done {
        checkpoint: "checkpoint.json".into(),
        curve: "curve.csv".into(),
    }
}

proptest! {
    #[test]
    fn curve_csv_is_bit_exact(curve in arb_curve(), first in 1u32..500) {
        let rows = parse_curve(&curve_csv(&curve, first)).unwrap();
        prop_assert_eq!(rows[0].epoch, first);
        prop_assert_eq!(rows.last().unwrap().epoch, first + curve.len() as u32 - 1);
        let back = rows_to_curve(&rows);
        for (a, b) in back.train.iter().chain(&back.test).zip(curve.train.iter().chain(&curve.test)) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn epoch_events_round_trip(e in 1u32..100_000, a in finite(), b in finite()) {
        let ev = epoch(e, a, b);
        let back = parse_event_line(&ev.to_line()).unwrap();
        prop_assert_eq!(back, ev);
    }

    /// A well-formed session passes; moving one epoch event anywhere else
    /// breaks it.
    #[test]
    fn validator_accepts_exactly_ordered_sessions(first in 1u32..50, n in 1u32..12, swap in any::<prop::sample::Index>()) {
        let mut events: Vec<WorkerEvent> = (0..n).map(|i| epoch(first + i, 1.0, 1.0)).collect();
        events.push(done());
        let mut v = SessionValidator::new(first, n);
        for ev in &events {
            v.accept(ev).unwrap();
        }
        v.finish().unwrap();

        let i = swap.index(n as usize);
        let mut shuffled = events.clone();
        let moved = shuffled.remove(i);
        shuffled.push(moved);
        let mut v = SessionValidator::new(first, n);
        let ok = shuffled.iter().all(|ev| v.accept(ev).is_ok());
        prop_assert!(!ok);
    }
}

#[test]
fn curve_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    let c = LossCurve {
        train: vec![1.0, 0.5, 0.25],
        test: vec![1.5, 0.75, 0.375],
    };
    write_curve(&path, &c, 11).unwrap();
    let rows = read_curve(&path).unwrap();
    assert_eq!(rows[0].epoch, 11);
    assert_eq!(rows_to_curve(&rows), c);
    std::fs::write(&path, "epoch,train_loss,test_loss\n1,a,1\n").unwrap();
    assert!(read_curve(&path).is_err());
}

#[test]
fn command_lines_round_trip() {
    let cfg = gridrun_core::config::parse_config("[PROCESS]\npipeline_scheme = m\n\n[MONITOR]\n\n[a]\ntype = m\nclass = c\nx = 1\n").unwrap();
    let p = gridrun_core::pipeline::generate_pipelines(&cfg).unwrap().remove(0);
    let line = format!(
        r#"{{"cmd":"run","pipeline":{},"epochs":3,"lr":0.001,"loss_function":"MSELoss","seed":7,"resume_from":"ck.json","resource_token":"gpu0","data_seed":9}}"#,
        serde_json::to_string(&p).unwrap()
    );
    let cmd = parse_command_line(&line).unwrap();
    let Command::Run(run) = &cmd;
    assert_eq!(run.pipeline, p);
    assert_eq!(run.data_seed, Some(9));
    assert_eq!(parse_command_line(&command_line(&cmd)).unwrap(), cmd);
    assert!(parse_command_line(r#"{"cmd":"stop"}"#).is_err());
}

/// The checkpoint document carries its format tag and survives a
/// serialize/deserialize cycle unchanged.
#[test]
fn checkpoint_json_format() {
    let model = MlpModel::he_uniform(vec![3, 4, 1], 5);
    let state = TrainState::new(&model, 6);
    let ck = Checkpoint::capture(&model, &state);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    ck.save(&path).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(doc["format"], CHECKPOINT_FORMAT);
    let reparsed: Checkpoint = serde_json::from_value(doc.clone()).unwrap();
    assert_eq!(reparsed, ck);

    let mut wrong = doc;
    wrong["format"] = "something-else".into();
    std::fs::write(&path, wrong.to_string()).unwrap();
    assert!(Checkpoint::load(&path).and_then(|c| c.restore()).is_err());
}
