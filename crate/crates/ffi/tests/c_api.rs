use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use mole::checkpoint::Checkpoint;
use mole::config::ModelConfig;
use mole::corpus::{derived_rng, generate_corpus, CorpusSpec};
use mole::model::Model;
use mole::tensor::Tensor;
use mole_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mole_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    path: CString,
    model: Model,
    feats: Tensor,
}

fn fixture() -> Fixture {
    let corpus = generate_corpus(&CorpusSpec {
        train_frames: 300,
        dev_utterances: 0,
        test_utterances: 5,
        ..CorpusSpec::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        num_blocks: 2,
        expert_positions: vec![1, 2],
        d_model: 8,
        d_ff: 8,
        gate_hidden: 4,
        ..ModelConfig::default()
    }
    .resolved(
        corpus.feature_dim(),
        corpus.vocabulary.size(),
        corpus.num_languages(),
    )
    .unwrap();
    let model = Model::new(&cfg).unwrap();
    let vocab: String = corpus.vocabulary.chars().iter().collect();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    Checkpoint::from_model(&model, &vocab, &derived_rng(1, "batches"))
        .save(&p)
        .unwrap();
    Fixture {
        path: CString::new(p.to_str().unwrap()).unwrap(),
        _dir: dir,
        model,
        feats: corpus.test[0].features.clone(),
    }
}

#[test]
fn load_infer_route_and_free() {
    let f = fixture();
    let mut h: *mut MoleModel = ptr::null_mut();
    unsafe {
        assert_eq!(mole_model_load(f.path.as_ptr(), &mut h), MoleStatus::Ok);
        assert!(!h.is_null());
        let (mut dim, mut classes, mut layers) = (0, 0, 0);
        assert_eq!(
            mole_model_info(h, &mut dim, &mut classes, &mut layers),
            MoleStatus::Ok
        );
        assert_eq!(
            (dim, classes, layers),
            (f.model.config.feature_dim, f.model.config.vocab_size, 2)
        );

        let frames = f.feats.rows();
        let mut out = vec![0.0; frames * classes];
        let s = mole_model_log_probs(
            h,
            f.feats.data().as_ptr(),
            frames,
            dim,
            out.as_mut_ptr(),
            out.len(),
        );
        assert_eq!(s, MoleStatus::Ok);
        let expect = f.model.infer(&f.feats).unwrap();
        assert_eq!(out, expect.log_probs.data());

        let mut needed = 0;
        let s = mole_model_transcribe(
            h,
            f.feats.data().as_ptr(),
            frames,
            dim,
            ptr::null_mut(),
            0,
            &mut needed,
        );
        assert_eq!(s, MoleStatus::BufferTooSmall);
        assert!(needed >= 1);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        let s = mole_model_transcribe(
            h,
            f.feats.data().as_ptr(),
            frames,
            dim,
            buf.as_mut_ptr(),
            needed,
            &mut needed,
        );
        assert_eq!(s, MoleStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_bytes().len(), needed - 1);

        let (mut sel, mut gamma) = (usize::MAX, 0.0);
        assert_eq!(
            mole_model_route(
                h,
                f.feats.data().as_ptr(),
                frames,
                dim,
                1,
                &mut sel,
                &mut gamma
            ),
            MoleStatus::Ok
        );
        assert_eq!(
            (sel, gamma),
            (expect.routes[1].selected, expect.routes[1].gamma)
        );
        assert_eq!(
            mole_model_route(
                h,
                f.feats.data().as_ptr(),
                frames,
                dim,
                2,
                &mut sel,
                &mut gamma
            ),
            MoleStatus::InvalidArgument
        );
        assert!(last_error().contains("out of range"));

        assert_eq!(
            mole_model_log_probs(
                h,
                f.feats.data().as_ptr(),
                frames,
                dim + 1,
                out.as_mut_ptr(),
                out.len()
            ),
            MoleStatus::Dimension
        );
        mole_model_free(h);
    }
}

#[test]
fn load_errors_carry_codes_and_messages() {
    let mut h: *mut MoleModel = ptr::null_mut();
    let missing = CString::new("/nonexistent/m.ckpt").unwrap();
    unsafe {
        assert_eq!(mole_model_load(missing.as_ptr(), &mut h), MoleStatus::Io);
        assert!(h.is_null());
        assert!(last_error().contains("/nonexistent/m.ckpt"));
        assert_eq!(
            mole_model_load(ptr::null(), &mut h),
            MoleStatus::NullPointer
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        let p = CString::new(p.to_str().unwrap()).unwrap();
        assert_eq!(mole_model_load(p.as_ptr(), &mut h), MoleStatus::Format);
        mole_model_free(ptr::null_mut());
        assert_eq!(
            mole_model_info(
                ptr::null(),
                ptr::null_mut(),
                ptr::null_mut(),
                ptr::null_mut()
            ),
            MoleStatus::NullPointer
        );
    }
}

#[test]
fn ctc_and_cer_values() {
    let lp = [0.5f64.ln(); 4];
    let mut loss = 0.0;
    unsafe {
        assert_eq!(
            mole_ctc_loss(lp.as_ptr(), 2, 2, [1usize].as_ptr(), 1, &mut loss),
            MoleStatus::Ok
        );
        assert!((loss + 0.75f64.ln()).abs() < 1e-12);
        assert_eq!(
            mole_ctc_loss(lp.as_ptr(), 2, 2, [1usize, 1, 1].as_ptr(), 3, &mut loss),
            MoleStatus::Ok
        );
        assert_eq!(loss, f64::INFINITY);
        assert_eq!(
            mole_ctc_loss(lp.as_ptr(), 2, 2, [5usize].as_ptr(), 1, &mut loss),
            MoleStatus::Contract
        );
        assert!(!last_error().is_empty());

        let kitten: Vec<u32> = "kitten".chars().map(u32::from).collect();
        let sitting: Vec<u32> = "sitting".chars().map(u32::from).collect();
        let mut c = 0.0;
        assert_eq!(
            mole_cer(kitten.as_ptr(), 6, sitting.as_ptr(), 7, &mut c),
            MoleStatus::Ok
        );
        assert_eq!(c, 3.0 / 7.0);
        assert_eq!(last_error(), "");
        assert_eq!(
            mole_cer(ptr::null(), 0, sitting.as_ptr(), 7, &mut c),
            MoleStatus::Ok
        );
        assert_eq!(c, 1.0);
        assert_eq!(
            mole_cer(kitten.as_ptr(), 6, ptr::null(), 0, &mut c),
            MoleStatus::Contract
        );
    }
}

#[test]
fn header_compiles_as_c() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"mole.h\"\nint main(void) { MoleModel *m = 0; return mole_model_load(\"x\", &m) == MOLE_STATUS_OK; }\n",
    )
    .unwrap();
    let out = match Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I", include])
        .arg(&src)
        .output()
    {
        Ok(o) => o,
        Err(_) => {
            eprintln!("no C compiler available; skipping");
            return;
        }
    };
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
