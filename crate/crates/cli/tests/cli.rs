use std::path::Path;
use std::process::{Command, Output};

fn ecnnkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecnnkit")).args(args).output().expect("binary runs")
}

fn stdout_ok(args: &[&str]) -> String {
    let out = ecnnkit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn field(text: &str, key: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no `{key}` in\n{text}"));
    line.rsplit(':').next().unwrap().trim().parse().unwrap()
}

#[test]
fn analyze_reports_uhd30_bandwidth() {
    let s = stdout_ok(&["analyze", "-m", "DnERNet-B3R1N0", "--res", "3840x2160", "--fps", "30"]);
    let gbs = field(&s, "DRAM GB/s block-based");
    assert!((gbs - 1.66).abs() / 1.66 < 0.05, "{gbs}");
    assert!((field(&s, "NBR analytic") - 2.218).abs() < 1e-3);
    assert!(s.contains("feasible: yes"));
}

#[test]
fn analyze_plain_model_frame_based_column() {
    let s = stdout_ok(&["analyze", "-m", "plain-D20C64", "--res", "1920x1080", "--fps", "30"]);
    let gbs = field(&s, "DRAM GB/s frame-based");
    assert!((gbs - 303.0).abs() / 303.0 < 0.01, "{gbs}");
}

#[test]
fn scan_frontier() {
    let hi = stdout_ok(&["scan", "--family", "sr4", "--budget", "655"]);
    assert!(hi.lines().any(|l| l.starts_with("SR4ERNet-B34R4N0,34,4,0,4.000")), "{hi}");
    let empty = stdout_ok(&["scan", "--family", "sr4", "--budget", "0.001"]);
    assert_eq!(empty.lines().count(), 1);

    let lo = stdout_ok(&["scan", "--family", "sr4", "--budget", "328"]);
    let re = |t: &str| -> Vec<(u32, f64)> {
        t.lines().skip(1).map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[4].parse().unwrap())
        }).collect()
    };
    let (lo, hi) = (re(&lo), re(&hi));
    assert!(lo.len() <= hi.len());
    for (b, r) in lo {
        let (_, rh) = hi.iter().find(|(bh, _)| *bh == b).expect("every low-budget B stays feasible");
        assert!(*rh >= r);
    }
}

#[test]
fn compile_asm_disasm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fbs = dir.path().join("dn.fbs");
    let bin = dir.path().join("dn.bin");
    let back = dir.path().join("back.fbs");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let out = ecnnkit(&["compile", "-m", "DnERNet-B3R1N0", "-o", &p(&fbs)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("6 instructions"));
    stdout_ok(&["asm", &p(&fbs), "-o", &p(&bin)]);
    stdout_ok(&["disasm", &p(&bin), "-o", &p(&back)]);
    assert_eq!(std::fs::read_to_string(&fbs).unwrap(), std::fs::read_to_string(&back).unwrap());

    let again = dir.path().join("again.fbs");
    stdout_ok(&["compile", "-m", "DnERNet-B3R1N0", "-o", &p(&again)]);
    assert_eq!(std::fs::read(&fbs).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn run_matches_oracle_and_writes_image() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("out.ppm");
    let s = stdout_ok(&["run", "-m", "DnERNet-B3R1N0", "--res", "96x80", "--block", "48", "--oracle", "-o", img.to_str().unwrap()]);
    assert!(s.contains("bit-exact: true"), "{s}");
    let bytes = std::fs::read(&img).unwrap();
    assert!(bytes.starts_with(b"P6\n96 80\n255\n"));
    assert_eq!(bytes.len(), 13 + 96 * 80 * 3);

    let trace = dir.path().join("trace.csv");
    stdout_ok(&["run", "-m", "SR2ERNet-B2R2N0", "--res", "32x32", "--oracle", "--trace", trace.to_str().unwrap()]);
    let t = std::fs::read_to_string(&trace).unwrap();
    assert!(t.starts_with("cycle,unit,bank,op\n") && t.lines().count() > 1);
}

#[test]
fn thread_cap_does_not_change_results() {
    let args = ["run", "-m", "DnERNet-12ch-B2R1N0", "--res", "64x64", "--block", "32", "--oracle"];
    let a = stdout_ok(&args);
    let out = Command::new(env!("CARGO_BIN_EXE_ecnnkit")).args(args).env("ECNNKIT_THREADS", "1").output().unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), a);
}

#[test]
fn encode_reports_compression() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("p.fbpc");
    let s = stdout_ok(&["encode", "-m", "DnERNet-B3R1N0", "-o", c.to_str().unwrap()]);
    // untrained weights are close to uniform, so the ratio sits near one
    let ratio = field(&s, "compression ratio");
    let expect = field(&s, "raw bytes") / field(&s, "container bytes");
    assert!((ratio - expect).abs() < 1e-3 && ratio > 0.5, "{s}");
    assert!(field(&s, "category code bits") >= field(&s, "entropy bits"));
    assert!(std::fs::metadata(&c).unwrap().len() as f64 >= field(&s, "container bytes"));
}

#[test]
fn perf_uhd30_is_realtime() {
    let s = stdout_ok(&["perf", "-m", "DnERNet-B3R1N0", "--res", "3840x2160", "--fps", "30", "--clock", "250e6"]);
    assert!(s.contains("real-time: true"));
    assert!(field(&s, "cycles per second") <= 250e6);
    assert_eq!(s.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 6);
}

#[test]
fn quantized_model_document_compiles() {
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("dn.json");
    let d = doc.to_str().unwrap();
    let s = stdout_ok(&["quantize", "-m", "DnERNet-B2R2N1", "--norm", "l1", "-o", d]);
    assert!(s.contains("7-bit layers: []"));
    let fbs = dir.path().join("dn.fbs");
    let bin = dir.path().join("dn.bin");
    stdout_ok(&["compile", "-m", d, "-o", fbs.to_str().unwrap()]);
    // a binary program next to the document must not clobber its weights
    stdout_ok(&["asm", fbs.to_str().unwrap(), "-o", bin.to_str().unwrap()]);
    let r = stdout_ok(&["run", "-m", d, "--res", "40x40", "--oracle"]);
    assert!(r.contains("bit-exact: true"));
}

#[test]
fn errors_exit_nonzero() {
    let out = ecnnkit(&["analyze", "-m", "nonsense"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.fbs");
    std::fs::write(&bad, "CONV out=4x7 src=DI dst=XX param=@0 qw=Q7 qb=Q9 qo=Q5\n").unwrap();
    let out = ecnnkit(&["asm", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("1:"));

    assert!(!ecnnkit(&["analyze", "-m", "DnERNet-B3R1N0", "--res", "12"]).status.success());
    assert!(!ecnnkit(&["analyze", "-m", "DnERNet-B3R1N0", "--block", "8"]).status.success());
}
