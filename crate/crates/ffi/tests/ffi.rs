use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use billetdec_ffi::*;

fn fixture(name: &str) -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name);
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = bd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn decode_file(name: &str, opts: BdDecodeOptions) -> (String, Vec<(char, BdProvenance)>) {
    let mut lat = ptr::null_mut();
    assert_eq!(bd_lattice_load(fixture(name).as_ptr(), &mut lat), BdStatus::Ok);
    let mut rules = ptr::null_mut();
    assert_eq!(bd_rules_billet(&mut rules), BdStatus::Ok);
    let mut res = ptr::null_mut();
    assert_eq!(bd_decode(lat, rules, &opts, &mut res), BdStatus::Ok);
    let text = CStr::from_ptr(bd_result_text(res)).to_str().unwrap().to_string();
    let mut chars = Vec::new();
    for i in 0..bd_result_len(res) {
        let mut sym = 0u32;
        let mut prov = BdProvenance::Normal;
        assert_eq!(bd_result_char(res, i, &mut sym, ptr::null_mut(), &mut prov), BdStatus::Ok);
        chars.push((char::from_u32(sym).unwrap(), prov));
    }
    bd_result_free(res);
    bd_rules_free(rules);
    bd_lattice_free(lat);
    (text, chars)
}

#[test]
fn decodes_reference_lattice() {
    let mut opts = bd_decode_options_default();
    opts.repair_enabled = false;
    opts.rules_enabled = false;
    let (text, _) = unsafe { decode_file("b636021bb06.lat", opts) };
    assert_eq!(text, "B636021BB06");
}

#[test]
fn repair_and_rules_through_the_abi() {
    let mut opts = bd_decode_options_default();
    opts.rules_enabled = false;
    let (text, chars) = unsafe { decode_file("damaged.lat", opts) };
    assert_eq!(text, "B636021BB06");
    assert_eq!(chars.iter().filter(|c| c.1 == BdProvenance::BlankRepaired).count(), 1);

    let (text, chars) = unsafe { decode_file("rule_violation.lat", bd_decode_options_default()) };
    assert_eq!(text, "B636021BB06");
    assert_eq!(chars[0], ('B', BdProvenance::RuleCorrected));
}

#[test]
fn lattice_from_memory_and_json() {
    let alphabet = CString::new("AB").unwrap();
    // path A _ B
    let probs = [0.8, 0.1, 0.1, 0.1, 0.1, 0.8, 0.1, 0.8, 0.1];
    let mut lat = ptr::null_mut();
    unsafe {
        assert_eq!(bd_lattice_new(alphabet.as_ptr(), 3, 3, probs.as_ptr(), &mut lat), BdStatus::Ok);
        assert_eq!(bd_lattice_timesteps(lat), 3);
        let mut h = 0.0;
        assert_eq!(bd_lattice_mean_entropy(lat, &mut h), BdStatus::Ok);
        let row: f64 = -(0.8f64 * 0.8f64.ln() + 2.0 * 0.1 * 0.1f64.ln());
        assert!((h - row).abs() < 1e-12);

        let mut res = ptr::null_mut();
        assert_eq!(bd_decode(lat, ptr::null(), ptr::null(), &mut res), BdStatus::Ok);
        let mut json = ptr::null_mut();
        assert_eq!(bd_result_json(res, &mut json), BdStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(v["text"], "AB");
        bd_string_free(json);
        bd_result_free(res);

        assert_eq!(
            bd_lattice_new(alphabet.as_ptr(), 3, 4, probs.as_ptr(), &mut lat),
            BdStatus::InvalidArgument
        );
        bd_lattice_free(lat);
    }
}

#[test]
fn errors_are_reported_not_panicked() {
    unsafe {
        let mut lat = ptr::null_mut();
        assert_eq!(bd_lattice_load(ptr::null(), &mut lat), BdStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert!(lat.is_null());

        let missing = CString::new("/nonexistent/x.lat").unwrap();
        assert_eq!(bd_lattice_load(missing.as_ptr(), &mut lat), BdStatus::Io);

        let bad = CString::new("LAT1 1 3 AB\n0.5 0.2 0.2\n").unwrap();
        assert_eq!(bd_lattice_parse(bad.as_ptr(), &mut lat), BdStatus::Parse);

        let bad_rules = CString::new("year DIGIT\n").unwrap();
        let mut rules = ptr::null_mut();
        assert_eq!(bd_rules_parse(bad_rules.as_ptr(), &mut rules), BdStatus::Parse);

        let mut res = ptr::null_mut();
        assert_eq!(bd_decode(ptr::null(), ptr::null(), ptr::null(), &mut res), BdStatus::NullPointer);
        assert_eq!(bd_result_char(ptr::null(), 0, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), BdStatus::NullPointer);

        // a successful call clears the message
        let mut d = 0usize;
        let (a, b) = (CString::new("abc").unwrap(), CString::new("abd").unwrap());
        assert_eq!(bd_edit_distance(a.as_ptr(), b.as_ptr(), &mut d), BdStatus::Ok);
        assert_eq!(d, 1);
        assert!(bd_last_error().is_null());

        bd_lattice_free(ptr::null_mut());
        bd_result_free(ptr::null_mut());
        bd_string_free(ptr::null_mut());
    }
}

#[test]
fn numeric_helpers() {
    unsafe {
        let p = [0.5, 0.5];
        let mut h = 0.0;
        assert_eq!(bd_entropy(p.as_ptr(), 2, &mut h), BdStatus::Ok);
        assert!((h - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(bd_entropy([0.5, 0.6].as_ptr(), 2, &mut h), BdStatus::InvalidArgument);

        let prob = [0.2, 0.5, 0.9];
        let thresh = [0.5, 0.5, 0.5];
        let mut out = [0.0; 3];
        assert_eq!(bd_db_binarize(prob.as_ptr(), thresh.as_ptr(), 3, 50.0, out.as_mut_ptr()), BdStatus::Ok);
        for i in 0..3 {
            let want = 1.0 / (1.0 + (-50.0f64 * (prob[i] - thresh[i])).exp());
            assert!((out[i] - want).abs() < 1e-15);
        }
    }
    let v = unsafe { CStr::from_ptr(bd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn rules_validation() {
    unsafe {
        let mut rules = ptr::null_mut();
        assert_eq!(bd_rules_billet(&mut rules), BdStatus::Ok);
        let mut ok = false;
        let good = CString::new("B636021BB06").unwrap();
        assert_eq!(bd_rules_is_valid(rules, good.as_ptr(), &mut ok), BdStatus::Ok);
        assert!(ok);
        let bad = CString::new("8636021BB06").unwrap();
        assert_eq!(bd_rules_is_valid(rules, bad.as_ptr(), &mut ok), BdStatus::Ok);
        assert!(!ok);
        bd_rules_free(rules);
    }
}

#[test]
fn model_classifies_strip() {
    use billetdec::model::{Architecture, ModelParams};
    use billetdec::numeric::Alphabet;
    let dir = tempfile_dir();
    let path = dir.join("init.ckpt");
    ModelParams::init(Architecture::default(), Alphabet::parse(Alphabet::DIGITS_LETTERS).unwrap(), 1)
        .unwrap()
        .save(&path)
        .unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let pixels = vec![0.1; 32 * 384];
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(bd_model_load(cpath.as_ptr(), &mut model), BdStatus::Ok);
        let mut lat = ptr::null_mut();
        assert_eq!(bd_model_classify_strip(model, pixels.as_ptr(), 32, 384, 16, &mut lat), BdStatus::Ok);
        assert_eq!(bd_lattice_timesteps(lat), 23);
        assert_eq!(bd_lattice_classes(lat), 37);
        bd_lattice_free(lat);
        assert_eq!(
            bd_model_classify_strip(model, pixels.as_ptr(), 32, 16, 16, &mut lat),
            BdStatus::InvalidArgument
        );
        bd_model_free(model);
    }
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempfile_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("ffi-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/billetdec.h")).unwrap();
    for sym in [
        "BD_STATUS_OK = 0",
        "BD_PROVENANCE_BLANK_REPAIRED",
        "typedef struct BdLattice BdLattice;",
        "typedef struct BdDecodeOptions",
        "const char *bd_last_error(void);",
        "const char *bd_version(void);",
        "void bd_string_free(char *s);",
        "bd_lattice_new(",
        "bd_lattice_parse(",
        "bd_lattice_load(",
        "bd_lattice_free(",
        "bd_rules_billet(",
        "bd_rules_parse(",
        "bd_model_load(",
        "bd_model_classify_strip(",
        "struct BdDecodeOptions bd_decode_options_default(void);",
        "bd_decode(",
        "bd_result_text(",
        "bd_result_json(",
        "bd_entropy(",
        "bd_db_binarize(",
        "bd_edit_distance(",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}

/// Compiles the C smoke test against the static library, when a C compiler is present.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let lib = [deps.join("libbilletdec_ffi.a"), deps.parent().unwrap().join("libbilletdec_ffi.a")]
        .into_iter()
        .find(|p| p.exists());
    let Some(lib) = lib else {
        eprintln!("static library not found next to {}, skipping", exe.display());
        return;
    };
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out = tempfile_dir().join("smoke");
    let status = Command::new(&cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status();
    let Ok(status) = status else {
        eprintln!("no C compiler ({cc}), skipping");
        return;
    };
    assert!(status.success(), "C compilation failed");
    let run = Command::new(&out).arg(fixture("damaged.lat").to_str().unwrap()).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8(run.stdout).unwrap(), "B636021BB6\nB636021BB06\nrepaired 0\n");
}
