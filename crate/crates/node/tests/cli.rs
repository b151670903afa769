use std::net::TcpListener;
use std::process::{Command, Output, Stdio};

fn xmk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn csv_rows(path: &std::path::Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let mut rows = vec![header];
    for rec in r.records() {
        rows.push(rec.unwrap().iter().map(String::from).collect());
    }
    rows
}

#[test]
fn usage_errors_exit_with_two() {
    let out = xmk(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(
        xmk(&["simulate", "--rounds", "many"]).status.code(),
        Some(2)
    );
    assert_eq!(xmk(&["bench", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(xmk(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one_and_a_diagnostic() {
    let out = xmk(&["sizes", "--preset", "huge"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: ") && err.contains("huge"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "devices = 3\nrounds = lots\n").unwrap();
    let out = xmk(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = xmk(&["bench", "--reps", "2", "--weights", "492"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_writes_accuracy_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("acc.csv");
    let out = xmk(&[
        "simulate",
        "--devices",
        "10",
        "--rounds",
        "5",
        "--local-epochs",
        "40",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = csv_rows(&out_path);
    assert_eq!(rows[0], ["scheme", "trial", "round", "accuracy"]);
    assert_eq!(rows.len(), 6);
    for (i, row) in rows[1..].iter().enumerate() {
        assert_eq!(row[0], "xmkckks");
        assert_eq!(row[2], (i + 1).to_string());
        let acc: f64 = row[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn bench_writes_one_record_per_cell_and_rep() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("bench.csv");
    let out = xmk(&[
        "bench",
        "--preset",
        "small",
        "--devices",
        "2",
        "--weights",
        "492,4920,49200,320000",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = csv_rows(&out_path);
    assert_eq!(
        rows[0],
        [
            "scheme",
            "phase",
            "weight_count",
            "rep",
            "wall_time_ms",
            "bytes_on_wire"
        ]
    );
    assert_eq!(rows.len() - 1, 4 * 3 * 4 * 4);
    for row in &rows[1..] {
        let t: f64 = row[4].parse().unwrap();
        assert!(t >= 0.0);
    }
}

#[test]
fn sizes_reports_matching_counts() {
    let out = xmk(&["sizes", "--devices", "4", "--weights", "492,5000"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        assert_eq!(
            rec[5], rec[6],
            "computed and measured bytes differ: {rec:?}"
        );
        let expected = match &rec[0] {
            "encrypted_update" => "2",
            "csum1_broadcast" | "dec_share" => "1",
            "mkckks_sum" => "5",
            other => panic!("{other}"),
        };
        assert_eq!(&rec[4], expected);
        n += 1;
    }
    assert_eq!(n, 8);
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

#[test]
fn server_and_devices_as_separate_processes() {
    let dir = tempfile::tempdir().unwrap();
    let addr = format!("127.0.0.1:{}", free_port());
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "# shared settings\nlisten = {addr}\ndevices = 3\npreset = small\nseed = 4\nrounds = 2\nlocal_epochs = 3\ntimeout_ms = 20000\n"
        ),
    )
    .unwrap();
    let conf = conf.to_str().unwrap();

    // device 3 trains on a snapshot written by the data subcommand
    let data_dir = dir.path().join("data");
    assert!(xmk(&[
        "data",
        "--config",
        conf,
        "--dir",
        data_dir.to_str().unwrap()
    ])
    .status
    .success());
    let snap = data_dir.join("device-3.xmkd");
    assert!(snap.exists());

    let acc = dir.path().join("server.csv");
    let server = Command::new(env!("CARGO_BIN_EXE_xmk"))
        .args(["server", "--config", conf, "--out", acc.to_str().unwrap()])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    // give the listener a moment
    std::thread::sleep(std::time::Duration::from_millis(300));
    let devices: Vec<_> = [
        vec!["--id", "1"],
        vec!["--id", "2"],
        vec!["--id", "3", "--data", snap.to_str().unwrap()],
    ]
    .into_iter()
    .map(|extra| {
        let mut args = vec!["device", "--config", conf];
        args.extend(extra);
        Command::new(env!("CARGO_BIN_EXE_xmk"))
            .args(&args)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap()
    })
    .collect();
    let server = server.wait_with_output().unwrap();
    assert!(
        server.status.success(),
        "{}",
        String::from_utf8_lossy(&server.stderr)
    );
    for d in devices {
        let d = d.wait_with_output().unwrap();
        assert!(d.status.success(), "{}", String::from_utf8_lossy(&d.stderr));
        assert!(String::from_utf8_lossy(&d.stdout).contains("2 rounds completed, 0 failed"));
    }
    assert_eq!(csv_rows(&acc).len(), 3);
}
