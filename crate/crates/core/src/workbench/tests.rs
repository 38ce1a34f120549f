use std::collections::BTreeSet;
use std::path::Path;

use super::dot::{parse_dot_edges, to_dot};
use super::manifest::{load_session, load_session_file, SessionManifest, TrackEntry};
use super::report::{Artifacts, RunReport};
use super::synth::{chain_node, synth_generate, ChainRef, SynthSpec, GROUND_TRUTH_LOGIT};
use super::wav::{read_wav, write_wav_f32, write_wav_pcm};
use super::*;
use crate::audio::{sum_buffers, AudioBuffer};
use crate::document;
use crate::executor::{execute, plan_schedule};
use crate::graph::{apply_prune, build_mixing_console, metrics, ProcessorKind, PruneMask, SubgroupSpec};
use crate::losses::LossBreakdown;
use crate::training::TrainConfig;

fn ramp(len: usize, sr: u32) -> AudioBuffer {
    let l: Vec<f64> = (0..len).map(|i| ((i * 37) % 200) as f64 / 400.0 - 0.25).collect();
    let r: Vec<f64> = l.iter().map(|v| -0.5 * v).collect();
    AudioBuffer::new(l, r, sr).unwrap()
}

#[test]
fn wav_round_trips_in_every_supported_encoding() {
    let dir = tempfile::tempdir().unwrap();
    let a = ramp(500, 22_050);
    let f = dir.path().join("f.wav");
    write_wav_f32(&f, &a).unwrap();
    let back = read_wav(&f).unwrap();
    assert_eq!(back.sample_rate(), 22_050);
    assert!(back.max_abs_diff(&a) < 1e-7);

    for bits in [16u16, 24] {
        let p = dir.path().join(format!("p{bits}.wav"));
        write_wav_pcm(&p, &a, bits, false).unwrap();
        let back = read_wav(&p).unwrap();
        assert!(back.max_abs_diff(&a) <= 1.0 / f64::from(1u32 << (bits - 1)), "{bits}");
    }

    let m = dir.path().join("mono.wav");
    write_wav_pcm(&m, &a, 16, true).unwrap();
    let back = read_wav(&m).unwrap();
    assert_eq!(back.left(), back.right());
    assert!((back.left()[3] - a.left()[3]).abs() < 1e-4);
}

#[test]
fn wav_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_wav(&dir.path().join("nope.wav")), Err(WorkbenchError::MissingFile(_))));

    let empty = dir.path().join("empty.wav");
    write_wav_f32(&empty, &AudioBuffer::silent(0, 8000)).unwrap();
    assert!(matches!(read_wav(&empty), Err(WorkbenchError::EmptyAudio(_))));

    let eight = dir.path().join("eight.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 8000,
        bits_per_sample: 8,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&eight, spec).unwrap();
    w.write_sample(3i8).unwrap();
    w.finalize().unwrap();
    assert!(matches!(read_wav(&eight), Err(WorkbenchError::UnsupportedEncoding { .. })));

    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"not a wav file").unwrap();
    assert!(matches!(read_wav(&junk), Err(WorkbenchError::UnsupportedEncoding { .. })));
}

fn write_manifest(dir: &Path, m: &SessionManifest) -> std::path::PathBuf {
    let p = dir.join("session.json");
    std::fs::write(&p, serde_json::to_string(m).unwrap()).unwrap();
    p
}

#[test]
fn session_loads_resamples_and_pads() {
    let dir = tempfile::tempdir().unwrap();
    let sr = 44_100;
    write_wav_pcm(&dir.path().join("a.wav"), &ramp(4410, sr), 16, true).unwrap();
    write_wav_pcm(&dir.path().join("b.wav"), &ramp(2205, sr), 24, true).unwrap();
    write_wav_f32(&dir.path().join("mix.wav"), &ramp(4410, sr)).unwrap();
    let m = SessionManifest {
        tracks: vec![
            TrackEntry {
                path: "a.wav".into(),
                name: "a".into(),
                subgroup: 7,
            },
            TrackEntry {
                path: "b.wav".into(),
                name: "b".into(),
                subgroup: 2,
            },
        ],
        mix: "mix.wav".into(),
        sample_rate: 30_000,
    };
    let (_, s) = load_session_file(&write_manifest(dir.path(), &m)).unwrap();
    assert_eq!(s.sample_rate, 30_000);
    assert_eq!(s.len(), 3000);
    assert!(s.tracks.iter().all(|t| t.len() == 3000 && t.left() == t.right()));
    assert_eq!(s.mix.sample_rate(), 30_000);
    assert_ne!(s.mix.left(), s.mix.right());
    // Bus order follows the labels: label 2 (track 1) first.
    assert_eq!(s.subgroups.groups(), &[vec![1], vec![0]]);
    // The shorter track is zero-padded.
    assert_eq!(s.tracks[1].left()[2999], 0.0);
}

#[test]
fn session_loading_reports_missing_files_and_bad_manifests() {
    let dir = tempfile::tempdir().unwrap();
    write_wav_f32(&dir.path().join("mix.wav"), &ramp(100, 8000)).unwrap();
    let m = SessionManifest {
        tracks: vec![TrackEntry {
            path: "gone.wav".into(),
            name: String::new(),
            subgroup: 0,
        }],
        mix: "mix.wav".into(),
        sample_rate: 8000,
    };
    match load_session(&m, dir.path()) {
        Err(WorkbenchError::MissingFile(p)) => assert!(p.ends_with("gone.wav")),
        other => panic!("{:?}", other.map(|_| ())),
    }
    assert!(matches!(
        SessionManifest::load(&dir.path().join("none.json")),
        Err(WorkbenchError::MissingFile(_))
    ));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"tracks": [], "mix": "mix.wav"}"#).unwrap();
    assert!(matches!(SessionManifest::load(&bad), Err(WorkbenchError::Manifest { .. })));
    std::fs::write(&bad, r#"{"tracks": [{"path": "a.wav", "gain": 2}], "mix": "m.wav"}"#).unwrap();
    assert!(matches!(SessionManifest::load(&bad), Err(WorkbenchError::Manifest { .. })));
}

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        sample_rate: 8000,
        ..SynthSpec::new(3, 0.5, seed)
    }
}

#[test]
fn synth_without_processors_mixes_the_plain_sum() {
    let out = synth_generate(&small_spec(1)).unwrap();
    assert_eq!(out.graph.processor_count(), 0);
    let s = &out.session;
    let sum = sum_buffers(&s.tracks, s.len(), 8000);
    assert!(s.mix.max_abs_diff(&sum) < 1e-15);
    // Tracks are distinct mono signals.
    assert!(s.tracks.iter().all(|t| t.left() == t.right()));
    assert_ne!(s.tracks[0].left(), s.tracks[1].left());
}

#[test]
fn synth_mix_rerenders_from_the_emitted_document() {
    let spec = small_spec(4)
        .on_all_tracks(ProcessorKind::GainPan)
        .on_track(0, ProcessorKind::Equalizer)
        .on_track(2, ProcessorKind::Reverb);
    let out = synth_generate(&spec).unwrap();
    assert_eq!(out.graph.processor_count(), 5);
    assert!(out.params.iter().all(|(_, p)| p.logit == GROUND_TRUTH_LOGIT && p.weight() == 1.0));
    let text = document::serialize(&out.graph, &out.params).unwrap();
    let (g, p) = document::deserialize(&text).unwrap();
    let plan = plan_schedule(&g).unwrap();
    let mix = execute(&g, &plan, &p, &PruneMask::new(), &out.session.tracks).unwrap().mix;
    let scale = out.session.mix.max_abs();
    assert!(mix.max_abs_diff(&out.session.mix) <= 1e-6 * scale);

    let again = synth_generate(&spec).unwrap();
    assert_eq!(again.session, out.session);
    assert_ne!(synth_generate(&small_spec(5)).unwrap().session, synth_generate(&small_spec(4)).unwrap().session);
}

#[test]
fn chain_nodes_follow_the_console_order() {
    let g = build_mixing_console(2, &SubgroupSpec::single(2)).unwrap();
    for (pos, kind) in ProcessorKind::CHAIN.into_iter().enumerate() {
        assert_eq!(chain_node(&g, ChainRef::Track(1), kind).unwrap().0, 2 + 7 + pos as u32);
        assert_eq!(chain_node(&g, ChainRef::Bus(0), kind).unwrap().0, 2 + 14 + 1 + pos as u32);
    }
    assert!(chain_node(&g, ChainRef::Track(2), ProcessorKind::GainPan).is_none());
    let bad = SynthSpec::new(2, 1.0, 0).on_track(5, ProcessorKind::GainPan);
    assert!(matches!(synth_generate(&bad), Err(WorkbenchError::Synth(_))));
}

#[test]
fn dot_export_uses_type_letters_and_round_trips_edges() {
    let g = build_mixing_console(2, &SubgroupSpec::single(2)).unwrap();
    let dot = to_dot(&g);
    let letters: BTreeSet<char> = dot
        .lines()
        .filter_map(|l| l.split_once("label=\"").map(|(_, r)| r.chars().next().unwrap()))
        .collect();
    assert_eq!(letters, "iomecnsgrd".chars().collect());
    let edges: BTreeSet<_> = g.edges().iter().copied().collect();
    assert_eq!(parse_dot_edges(&dot).unwrap(), edges);
    assert!(parse_dot_edges("x -> n1;").is_err());
}

#[test]
fn reports_round_trip_and_match_metrics() {
    let console = build_mixing_console(2, &SubgroupSpec::single(2)).unwrap();
    let s = synth_generate(&SynthSpec {
        sample_rate: 8000,
        ..SynthSpec::new(2, 0.2, 0)
    })
    .unwrap()
    .session;
    let loss = LossBreakdown {
        audio: 0.25,
        total: 0.3,
        ..LossBreakdown::default()
    };
    let r = RunReport::for_fit(&TrainConfig::default(), &s, &console, loss, Artifacts::default()).unwrap();
    let back = RunReport::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.metrics.total_ratio, 0.0);
    assert!(r.metrics.per_type_ratio.values().all(|&v| v == 0.0));

    let gains: Vec<_> = console
        .processors()
        .filter(|(_, k)| *k == ProcessorKind::GainPan)
        .map(|(id, _)| id)
        .collect();
    let pruned = apply_prune(&console, &PruneMask::removing(gains)).unwrap();
    let m = metrics(&console, &pruned).unwrap();
    assert_eq!(m.per_type_ratio[&ProcessorKind::GainPan], 1.0);
    assert_eq!(m.per_type_ratio[&ProcessorKind::Reverb], 0.0);
    let text = serde_json::to_string(&m).unwrap();
    assert!(text.contains("\"g\":1.0"));
}

#[test]
fn atomic_writes_replace_whole_files_or_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("doc.json");
    atomic_write(&p, b"first").unwrap();
    atomic_write(&p, b"second").unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), b"second");
    let failed = atomic_write_with(&p, |mut f| {
        f.write_all(b"partial")?;
        Err(std::io::Error::other("boom"))
    });
    assert!(failed.is_err());
    assert_eq!(std::fs::read(&p).unwrap(), b"second");
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1);
}

#[test]
fn jsonl_and_csv_layouts() {
    let recs = vec![crate::pruning::ImportanceRecord {
        node: crate::graph::NodeId(4),
        kind: ProcessorKind::Equalizer,
        weight: 0.5,
        delta: 0.0,
    }];
    assert_eq!(importance_csv(&recs), "node,type,weight,delta\n4,e,5e-1,0e0\n");
    let text = to_jsonl(&recs).unwrap();
    assert_eq!(text.lines().count(), 1);
    let back: crate::pruning::ImportanceRecord = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(back, recs[0]);
}
