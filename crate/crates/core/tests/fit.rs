use mixprune::graph::{apply_prune, build_mixing_console, ProcessorKind, PruneMask};
use mixprune::params::ParamStore;
use mixprune::training::{train, TrainConfig, TrainRun};
use mixprune::workbench::synth::{chain_node, synth_generate, ChainRef, SynthSpec};

/// Log of the per-channel gain a gain/pan node applies, dry/wet mix included.
fn effective_log_gain(params: &ParamStore, id: mixprune::graph::NodeId) -> [f64; 2] {
    let p = params.get(id).unwrap();
    let w = p.weight();
    [0, 1].map(|c| (w * p.values[c].exp() + 1.0 - w).ln())
}

#[test]
fn gain_only_session_recovers_track_gains() {
    let spec = SynthSpec::new(2, 4.0, 21).on_all_tracks(ProcessorKind::GainPan);
    let synth = synth_generate(&spec).unwrap();
    let s = &synth.session;
    let console = build_mixing_console(2, &s.subgroups).unwrap();
    let others = console
        .processors()
        .filter(|(_, k)| *k != ProcessorKind::GainPan)
        .map(|(id, _)| id);
    let graph = apply_prune(&console, &PruneMask::removing(others)).unwrap();
    let mut params = ParamStore::init_for_graph(&graph, s.sample_rate, 21);
    let cfg = TrainConfig {
        seed: 21,
        ..TrainConfig::default()
    };
    train(&graph, &mut params, s, TrainRun::console(1000), &cfg).unwrap();

    let bus = chain_node(&console, ChainRef::Bus(0), ProcessorKind::GainPan).unwrap();
    let bus_gain = effective_log_gain(&params, bus);
    for k in 0..2 {
        let node = chain_node(&console, ChainRef::Track(k), ProcessorKind::GainPan).unwrap();
        let truth = &synth.params.get(node).unwrap().values;
        let fitted = effective_log_gain(&params, node);
        for c in 0..2 {
            let total = fitted[c] + bus_gain[c];
            assert!(
                (total - truth[c]).abs() < 0.05,
                "track {k} channel {c}: fitted {total:.4}, truth {:.4}",
                truth[c]
            );
        }
    }
}

#[test]
fn console_fit_trace_is_finite_and_decreasing() {
    let spec = SynthSpec::new(2, 4.0, 22)
        .on_all_tracks(ProcessorKind::GainPan)
        .on_track(0, ProcessorKind::Equalizer);
    let synth = synth_generate(&spec).unwrap();
    let s = &synth.session;
    let console = build_mixing_console(2, &s.subgroups).unwrap();
    let mut params = ParamStore::init_for_graph(&console, s.sample_rate, 22);
    let cfg = TrainConfig {
        seed: 22,
        ..TrainConfig::default()
    };
    let trace = train(&console, &mut params, s, TrainRun::console(300), &cfg).unwrap();
    assert_eq!(trace.len(), 300);
    assert!(trace.iter().all(|r| r.total.is_finite() && r.l_a.is_finite()));
    let mean = |r: &[mixprune::training::TraceRecord]| r.iter().map(|t| t.l_a).sum::<f64>() / r.len() as f64;
    let (start, end) = (mean(&trace[..100]), mean(&trace[200..]));
    assert!(end < start, "moving average rose from {start:.4} to {end:.4}");
}
