use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn coverage(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coverage"))
        .arg("--work")
        .arg(work)
        .args(["--jobs", "2"])
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ingest_args(data: &Path) -> Vec<String> {
    let f = |n: &str| data.join(n).to_string_lossy().into_owned();
    vec![
        "ingest".into(),
        "--highways".into(),
        f("highways.json"),
        "--coastline".into(),
        f("coastline.json"),
        "--region".into(),
        f("region.csv"),
        "--stations".into(),
        f("stations.csv"),
        "--critical".into(),
        f("critical.csv"),
    ]
}

struct Prepared {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

/// Synthetic data, ingested and with fields computed, shared by the tests.
fn prepared() -> &'static Prepared {
    static P: OnceLock<Prepared> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let work = root.join("work");
        ok(coverage(
            &work,
            &["synth", "--preset", "small", "--seed", "3", s(&data)],
        ));
        let args = ingest_args(&data);
        ok(coverage(&work, &args.iter().map(String::as_str).collect::<Vec<_>>()));
        ok(coverage(&work, &["compute-fields"]));
        Prepared { _dir: dir, root }
    })
}

#[test]
fn missing_input_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("nowhere");
    let args = ingest_args(&data);
    let o = coverage(
        &dir.path().join("work"),
        &args.iter().map(String::as_str).collect::<Vec<_>>(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("highways.json"), "{err}");
}

#[test]
fn compute_fields_without_cache_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = coverage(dir.path(), &["compute-fields"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("graph.bin"));
}

#[test]
fn malformed_highways_exits_2_with_offset() {
    let p = prepared();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    for f in ["coastline.json", "region.csv", "stations.csv", "critical.csv"] {
        std::fs::copy(p.root.join("data").join(f), data.join(f)).unwrap();
    }
    std::fs::write(
        data.join("highways.json"),
        br#"{"elements": [{"type": "node", "id": 1, "lat": 1.0, "lon": }]}"#,
    )
    .unwrap();
    let args = ingest_args(&data);
    let o = coverage(
        &dir.path().join("work"),
        &args.iter().map(String::as_str).collect::<Vec<_>>(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("highways.json") && err.contains("byte"), "{err}");
}

#[test]
fn reingest_gives_identical_cache() {
    let p = prepared();
    let work2 = p.root.join("work-again");
    let args = ingest_args(&p.root.join("data"));
    ok(coverage(&work2, &args.iter().map(String::as_str).collect::<Vec<_>>()));
    for f in ["graph.bin", "landmask.geojson", "ingest_report.txt"] {
        let a = std::fs::read(p.root.join("work").join(f)).unwrap();
        let b = std::fs::read(work2.join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn scenario_run_and_export_geojson() {
    let p = prepared();
    let work = p.root.join("work");
    let run = p.root.join("run");
    ok(coverage(&work, &["scenario", "run", "--baseline", "--out", s(&run)]));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert!(summary["max_response_minutes"].as_f64().unwrap() > 0.0);

    let out = p.root.join("export");
    ok(coverage(
        &work,
        &["export", "--baseline", "--format", "geojson", "--out", s(&out)],
    ));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("bands.geojson")).unwrap()).unwrap();
    let legend: Vec<_> = v["legend"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["band"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(legend, ["green", "amber", "red", "blue", "brown", "black"]);
    let features = v["features"].as_array().unwrap();
    assert!(features.iter().any(|f| f["properties"]["band"] == "green"));
    assert!(features.iter().any(|f| f["properties"]["band"] == "brown"));
    assert!(out.join("landmask.geojson").exists());
    assert!(out.join("stations.geojson").exists());

    // the same export twice is byte-identical
    let again = p.root.join("export-again");
    ok(coverage(
        &work,
        &["export", "--baseline", "--format", "geojson", "--out", s(&again)],
    ));
    for f in ["bands.geojson", "diff.geojson", "areas.geojson"] {
        assert!(
            std::fs::read(out.join(f)).unwrap() == std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }

    let csv_out = p.root.join("export-csv");
    ok(coverage(&work, &["export", "--format", "csv", "--out", s(&csv_out)]));
    let bands = std::fs::read_to_string(csv_out.join("bands.csv")).unwrap();
    assert!(bands.starts_with("node_id,lon,lat,seconds,band"));
    let rep = p.root.join("export-report");
    ok(coverage(&work, &["export", "--format", "report", "--out", s(&rep)]));
    assert!(std::fs::read_to_string(rep.join("compliance.txt"))
        .unwrap()
        .contains("critical locations"));
}

#[test]
fn part_time_delay_sweep_writes_nine_map_pairs() {
    let p = prepared();
    let out = p.root.join("sweep");
    ok(coverage(
        &p.root.join("work"),
        &[
            "scenario",
            "sweep",
            "--family",
            "part-time-delay",
            "--from",
            "1",
            "--to",
            "9",
            "--out",
            s(&out),
        ],
    ));
    let mut bands = 0;
    let mut diffs = 0;
    for entry in std::fs::read_dir(&out).unwrap() {
        let d = entry.unwrap().path();
        if d.is_dir() {
            bands += d.join("bands.geojson").exists() as usize;
            diffs += d.join("diff.geojson").exists() as usize;
        }
    }
    assert_eq!((bands, diffs), (9, 9));
    let index = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(index.lines().count(), 10);
}

#[test]
fn compare_incidents_reports() {
    let p = prepared();
    let out = p.root.join("calibration");
    ok(coverage(
        &p.root.join("work"),
        &[
            "compare-incidents",
            s(&p.root.join("data").join("incidents.csv")),
            "--out",
            s(&out),
        ],
    ));
    let text = std::fs::read_to_string(out.join("calibration.txt")).unwrap();
    assert!(text.contains("incidents: 732"), "{text}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("calibration.json")).unwrap()).unwrap();
    assert!(report["factor"].as_f64().unwrap() > 0.0);
    assert!(out.join("histogram.csv").exists() && out.join("incidents.csv").exists());
}

#[test]
fn invalid_scenario_file_exits_2() {
    let p = prepared();
    let cfg = p.root.join("bad.toml");
    std::fs::write(&cfg, "speed_factor = 0.0\n").unwrap();
    let o = coverage(
        &p.root.join("work"),
        &["scenario", "run", "--config", s(&cfg), "--out", s(&p.root.join("bad"))],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("speed_factor"));

    std::fs::write(&cfg, "open = [false, false, false, false, false, false, false, false, false, false, false, false, false, false, false, false, false]\n").unwrap();
    let o = coverage(
        &p.root.join("work"),
        &["scenario", "run", "--config", s(&cfg), "--out", s(&p.root.join("bad"))],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn placement_writes_ranking() {
    let p = prepared();
    let out = p.root.join("place.csv");
    ok(coverage(
        &p.root.join("work"),
        &[
            "place",
            "4",
            "--radius-m",
            "600",
            "--stride",
            "3",
            "--top",
            "5",
            "--out",
            s(&out),
        ],
    ));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "rank,node,lon,lat,unreachable,objective");
    assert!(lines.len() > 1 && lines.len() <= 6);
    assert!(lines[1].starts_with("1,"));
}
