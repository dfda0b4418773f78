//! The checkpoint container has one job: `load(save(x)) == x`, bit for bit,
//! with nothing in the bytes that depends on when or where they were written.
//! Corruption must surface as a specific complaint, never a best-effort read.

use linksim::autodiff::ParamSet;
use linksim::checkpoint::{self, CkptError, MAGIC, VERSION};
use linksim::config;
use linksim::receiver::{BlockSpec, RxShape};
use linksim::training::{self, TrainConfig, TrainRun, TrainState};

fn tiny_shape() -> RxShape {
    RxShape {
        n_r: 1,
        n_sym: 2,
        n_sc: 4,
        m_max: 2,
        channels: 4,
        blocks: vec![BlockSpec { kernel: (3, 3), dilation: (1, 1) }],
        reduction: 4,
        adapter_kernel: 3,
        af_hidden: 3,
    }
}

fn tiny_config(shape: &RxShape) -> TrainConfig {
    TrainConfig {
        seed: 11,
        batch: 2,
        outer: 2,
        inner: 2,
        lr: 1e-3,
        ebno_db: (3.0, 6.0),
        orders: vec![shape.m_max],
        code_rate: 0.5,
        cp_len: 0,
        eps_p_db: Some(6.0),
        lambda0: 0.0,
        mu0: 0.1,
        tau: 1.004,
        profiles: vec!["flat".into()],
        speed_kmh: 0.0,
        carrier_hz: 3.5e9,
        delay_spread_s: 100e-9,
    }
}

/// A short real run so the fixture has non-trivial optimizer moments and a
/// dual state that actually moved.
fn trained_fixture() -> (ParamSet, TrainRun, serde_json::Value, String) {
    let shape = tiny_shape();
    let cfg = tiny_config(&shape);
    let mut params = training::init_params(&shape, 3).expect("init");
    let run = training::train(&mut params, &shape, &cfg, None).expect("train");
    let tree = serde_json::to_value(&cfg).expect("config tree");
    let hash = config::config_hash(&tree);
    (params, run, tree, hash)
}

fn err_of<T>(r: Result<T, CkptError>) -> CkptError {
    match r {
        Ok(_) => panic!("expected an error"),
        Err(e) => e,
    }
}

fn param_bits(params: &ParamSet) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    params
        .ids()
        .map(|id| {
            let t = params.value(id);
            (
                params.name(id).to_string(),
                t.shape().to_vec(),
                t.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

#[test]
fn round_trip_reproduces_every_byte() {
    let (params, run, tree, hash) = trained_fixture();

    let bytes = checkpoint::to_bytes(&params, Some(&run.adam), &run.state, &tree, &hash);
    let again = checkpoint::to_bytes(&params, Some(&run.adam), &run.state, &tree, &hash);
    assert_eq!(bytes, again, "serialization must be deterministic");
    assert_eq!(&bytes[..8], MAGIC);

    let ck = checkpoint::from_bytes(&bytes).expect("load");
    assert_eq!(ck.state, run.state);
    assert_eq!(ck.config, tree);
    assert_eq!(ck.config_hash, hash);
    assert_eq!(param_bits(&ck.params), param_bits(&params));
    for id in ck.params.ids() {
        assert_eq!(ck.params.partition(id), params.partition(id));
    }

    let adam = ck.adam().expect("optimizer");
    assert_eq!(adam.t(), run.adam.t());
    for id in params.ids() {
        let (m0, v0) = run.adam.moments(id).expect("fixture has moments");
        let (m1, v1) = adam.moments(ck.params.id(params.name(id)).unwrap()).unwrap();
        assert_eq!(m0.data(), m1.data());
        assert_eq!(v0.data(), v1.data());
    }

    // Full fixed point: re-serializing the loaded checkpoint reproduces the
    // original file exactly.
    let rebytes =
        checkpoint::to_bytes(&ck.params, Some(&adam), &ck.state, &ck.config, &ck.config_hash);
    assert_eq!(rebytes, bytes);
}

#[test]
fn files_round_trip_and_missing_files_are_io_errors() {
    let (params, run, tree, hash) = trained_fixture();
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("run.ckpt");

    checkpoint::save(&path, &params, Some(&run.adam), &run.state, &tree, &hash).expect("save");
    let ck = checkpoint::load(&path).expect("load");
    assert_eq!(ck.state, run.state);
    assert_eq!(param_bits(&ck.params), param_bits(&params));

    let missing = checkpoint::load(&dir.path().join("nope.ckpt"));
    assert!(matches!(missing, Err(CkptError::Io(_))));
}

#[test]
fn optimizer_state_is_optional() {
    let (params, run, tree, hash) = trained_fixture();
    let bytes = checkpoint::to_bytes(&params, None, &run.state, &tree, &hash);
    let ck = checkpoint::from_bytes(&bytes).expect("load");
    let adam = ck.adam().expect("empty optimizer still rebuilds");
    // Bias correction still resumes from the recorded step count even though
    // the moments start empty.
    assert_eq!(adam.t(), run.state.step);
    for id in ck.params.ids() {
        assert!(adam.moments(id).is_none());
    }
}

/// One dual update and zero gradient steps: the checkpoint must hold the
/// untouched initialization, with only the training state advanced.
#[test]
fn a_dual_only_run_checkpoints_its_initialization() {
    let shape = tiny_shape();
    let cfg = TrainConfig { outer: 1, inner: 0, ..tiny_config(&shape) };

    let mut params = training::init_params(&shape, 5).expect("init");
    let run = training::train(&mut params, &shape, &cfg, None).expect("train");
    let tree = serde_json::to_value(&cfg).unwrap();
    let hash = config::config_hash(&tree);
    let bytes = checkpoint::to_bytes(&params, Some(&run.adam), &run.state, &tree, &hash);
    let ck = checkpoint::from_bytes(&bytes).expect("load");

    let fresh = training::init_params(&shape, 5).expect("init");
    assert_eq!(param_bits(&ck.params), param_bits(&fresh));
    assert_eq!(ck.state.outer, 1);
    assert_eq!(ck.state.step, 0);
    assert_ne!(ck.state, TrainState::fresh(&cfg));
}

#[test]
fn header_fields_are_checked_loudly() {
    let (params, run, tree, hash) = trained_fixture();
    let bytes = checkpoint::to_bytes(&params, Some(&run.adam), &run.state, &tree, &hash);

    let mut wrong_version = bytes.clone();
    wrong_version[8..12].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        checkpoint::from_bytes(&wrong_version),
        Err(CkptError::Version { got: 2, want }) if want == VERSION
    ));

    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(checkpoint::from_bytes(&wrong_magic), Err(CkptError::BadMagic)));
    assert!(matches!(checkpoint::from_bytes(&bytes[..10]), Err(CkptError::BadMagic)));

    let mut wrong_order = bytes.clone();
    wrong_order[12..16].copy_from_slice(&0x0403_0201u32.to_le_bytes());
    assert!(matches!(checkpoint::from_bytes(&wrong_order), Err(CkptError::Endianness)));

    let mut runaway_manifest = bytes.clone();
    runaway_manifest[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
    let err = err_of(checkpoint::from_bytes(&runaway_manifest));
    assert!(err.to_string().contains("manifest length"), "{err}");

    let mut garbage_manifest = bytes.clone();
    garbage_manifest[24] = b'X';
    let err = err_of(checkpoint::from_bytes(&garbage_manifest));
    assert!(matches!(err, CkptError::Corrupt(_)), "{err}");

    let truncated = &bytes[..bytes.len() - 4];
    let err = err_of(checkpoint::from_bytes(truncated));
    assert!(err.to_string().contains("outside data section"), "{err}");
}

/// Re-encode the manifest after a targeted edit, keeping the data section.
fn with_manifest(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let mlen = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let mut manifest: serde_json::Value =
        serde_json::from_slice(&bytes[24..24 + mlen]).expect("manifest parses");
    edit(&mut manifest);
    let mbytes = serde_json::to_vec(&manifest).unwrap();
    let mut out = bytes[..16].to_vec();
    out.extend_from_slice(&(mbytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&mbytes);
    out.extend_from_slice(&bytes[24 + mlen..]);
    out
}

#[test]
fn tampered_manifests_are_rejected_record_by_record() {
    let (params, run, tree, hash) = trained_fixture();
    let bytes = checkpoint::to_bytes(&params, Some(&run.adam), &run.state, &tree, &hash);
    let expect = |bytes: Vec<u8>, needle: &str| {
        let err = err_of(checkpoint::from_bytes(&bytes));
        assert!(err.to_string().contains(needle), "wanted {needle:?} in {err}");
    };

    expect(
        with_manifest(&bytes, |m| {
            let name = m["tensors"][1]["name"].clone();
            m["tensors"][0]["name"] = name;
        }),
        "duplicate tensor",
    );
    expect(
        with_manifest(&bytes, |m| m["tensors"][0]["partition"] = "sideways".into()),
        "unknown partition",
    );
    expect(
        with_manifest(&bytes, |m| m["tensors"][0]["shape"] = serde_json::json!([999])),
        "does not hold",
    );
    expect(
        with_manifest(&bytes, |m| m["tensors"][0]["offset"] = serde_json::json!(1u64 << 60)),
        "outside data section",
    );
    expect(
        with_manifest(&bytes, |m| m["version"] = serde_json::json!(9)),
        "version",
    );

    // Drop one half of an optimizer pair.
    expect(
        with_manifest(&bytes, |m| {
            let tensors = m["tensors"].as_array_mut().unwrap();
            let at = tensors
                .iter()
                .position(|t| t["name"].as_str().unwrap().starts_with("optim.v."))
                .expect("fixture has moments");
            tensors.remove(at);
        }),
        "unpaired optimizer",
    );
    expect(
        with_manifest(&bytes, |m| {
            let tensors = m["tensors"].as_array_mut().unwrap();
            let rec = tensors
                .iter_mut()
                .find(|t| t["name"].as_str().unwrap().starts_with("optim.m."))
                .unwrap();
            rec["name"] = "optim.q.mystery".into();
        }),
        "unrecognized optimizer",
    );

    // Moments naming a parameter that does not exist survive parsing but
    // fail when the optimizer is rebuilt.
    let ghost = with_manifest(&bytes, |m| {
        for rec in m["tensors"].as_array_mut().unwrap() {
            let name = rec["name"].as_str().unwrap();
            if name.starts_with("optim.m.") {
                rec["name"] = "optim.m.ghost".into();
            } else if name.starts_with("optim.v.") {
                rec["name"] = "optim.v.ghost".into();
            }
        }
        // Keep exactly one pair so pairing still succeeds.
        let tensors = m["tensors"].as_array_mut().unwrap();
        let mut seen = (false, false);
        tensors.retain(|t| {
            let name = t["name"].as_str().unwrap();
            if name == "optim.m.ghost" {
                if seen.0 {
                    return false;
                }
                seen.0 = true;
            } else if name == "optim.v.ghost" {
                if seen.1 {
                    return false;
                }
                seen.1 = true;
            }
            true
        });
    });
    let ck = checkpoint::from_bytes(&ghost).expect("pairs are intact");
    let err = err_of(ck.adam());
    assert!(err.to_string().contains("unknown parameter"), "{err}");
}

/// Saving and reloading must not fork the trajectory: training the restored
/// parameters gives bitwise the same result as training the originals.
#[test]
fn a_loaded_checkpoint_drives_the_same_future_as_the_live_params() {
    let (mut live, run, tree, hash) = trained_fixture();
    let bytes = checkpoint::to_bytes(&live, Some(&run.adam), &run.state, &tree, &hash);
    let mut restored = checkpoint::from_bytes(&bytes).expect("load").params;

    let shape = tiny_shape();
    let next_leg = TrainConfig { seed: 99, outer: 1, inner: 3, ..tiny_config(&shape) };
    training::train(&mut live, &shape, &next_leg, None).expect("train live");
    training::train(&mut restored, &shape, &next_leg, None).expect("train restored");
    assert_eq!(param_bits(&live), param_bits(&restored));
}

#[test]
fn empty_parameter_sets_are_legal() {
    let params = ParamSet::new();
    let state = TrainState { lambda: 0.0, mu: 0.1, outer: 0, step: 0 };
    let tree = serde_json::json!({});
    let bytes = checkpoint::to_bytes(&params, None, &state, &tree, "");
    let ck = checkpoint::from_bytes(&bytes).expect("load");
    assert_eq!(ck.params.ids().count(), 0);
    assert_eq!(ck.state, state);
}
