use std::path::PathBuf;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamcnn::netmodel::{
    load_tensor, parse_network, random_network_filters, random_tensor, store_filters, store_tensor,
};
use streamcnn::oracle::run_network_ref;
use streamcnn::planner::{read_command_stream, Opcode};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamcnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn toy() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("nets/toy.net")
        .display()
        .to_string()
}

fn alexnet_path() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("nets/alexnet.net")
        .display()
        .to_string()
}

#[test]
fn plan_prints_five_layers_and_writes_a_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cmds = dir.path().join("alexnet.kcmd");
    let o = bin(&[
        "plan",
        "--net",
        &alexnet_path(),
        "--sram-kb",
        "128",
        "--out",
        cmds.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for row in 1..=5 {
        assert!(text.lines().any(|l| l.starts_with(&format!("{row} "))), "{text}");
    }
    assert!(text.contains("1.3G") && text.contains("2.1MB"));
    let stream = read_command_stream(&mut std::fs::File::open(&cmds).unwrap()).unwrap();
    assert_eq!(stream.iter().filter(|c| c.op == Opcode::Barrier).count(), 5);
}

#[test]
fn plan_csv_and_forced_tile() {
    let o = bin(&["plan", "--format", "csv", "--tile", "3,3,2", "--layer", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let l1: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&l1[..4], ["1", "3", "3", "2"]);
    assert_eq!(l1[5], (76 * 76 * 3 * 2).to_string());
}

#[test]
fn exit_codes() {
    let unknown = bin(&["plan", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(bin(&["plan", "--sram-kb", "1"]).status.code(), Some(2));
    assert_eq!(bin(&["plan", "--net", "/nonexistent/net.txt"]).status.code(), Some(4));
    // a forced split that does not fit the bank
    assert_eq!(bin(&["plan", "--tile", "1,1,1"]).status.code(), Some(2));
    // run needs weights or an explicit request for random ones
    assert_eq!(bin(&["run", "--net", &toy()]).status.code(), Some(1));
    assert_eq!(bin(&["report", "/nonexistent/run.json"]).status.code(), Some(4));
}

#[test]
fn verify_toy_network() {
    let o = bin(&["verify", "--net", &toy(), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.matches("values identical").count(), 3);
    assert!(text.trim_end().ends_with("verify: OK"));
}

#[test]
fn run_with_files_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let net = parse_network(&std::fs::read_to_string(toy()).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (w, h, c) = net.layers[0].in_dims();
    let input = random_tensor(&mut rng, c, h, w, 4.0);
    let weights = random_network_filters(&mut rng, &net);
    let (ip, wp) = (dir.path().join("in.fxt"), dir.path().join("w.fxw"));
    store_tensor(&input, &ip).unwrap();
    store_filters(&weights, &wp).unwrap();
    let (rec, outp) = (dir.path().join("run.json"), dir.path().join("out.fxt"));
    let o = bin(&[
        "run",
        "--net",
        &toy(),
        "--input",
        ip.to_str().unwrap(),
        "--weights",
        wp.to_str().unwrap(),
        "--out",
        rec.to_str().unwrap(),
        "--save-output",
        outp.to_str().unwrap(),
        "--freq-mhz",
        "20",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("TOPS/W"));
    assert_eq!(
        load_tensor(&outp).unwrap(),
        run_network_ref(&net, &input, &weights).unwrap()
    );

    let text = bin(&["report", rec.to_str().unwrap()]);
    assert_eq!(text.status.code(), Some(0));
    let csv = bin(&["report", rec.to_str().unwrap(), "--format", "csv"]);
    let csv = stdout(&csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("layer,input,output,ops"));
    // the throughput columns are filled from the record
    assert!(lines[1..].iter().all(|l| !l.contains(",-,")));
    // report at the recorded clock matches what run printed
    let run_text = stdout(&o);
    let run_rows: Vec<&str> = run_text.lines().take(6).map(str::trim).collect();
    let report_text = stdout(&text);
    let report_rows: Vec<&str> = report_text.lines().take(6).map(str::trim).collect();
    assert_eq!(run_rows, report_rows);
}

#[test]
fn random_weights_run_and_help() {
    let o = bin(&[
        "run",
        "--net",
        &toy(),
        "--random-weights",
        "--seed",
        "1",
        "--format",
        "csv",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 5);
    let help = bin(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for sub in ["plan", "run", "verify", "report"] {
        assert!(stdout(&help).contains(sub));
    }
}
