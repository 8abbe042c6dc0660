use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgl-ocp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Value printed after `key` in the solve summary.
fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).filter(|r| r.starts_with(' ')))
        .unwrap_or_else(|| panic!("no '{key}' in\n{text}"))
        .trim()
        .parse()
        .unwrap()
}

fn without_wall_time(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

#[test]
fn list_problems_names_builtins() {
    let o = run(&["list-problems"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for name in ["counterexample", "cubic_chain", "sine_tracking"] {
        assert!(text.contains(name));
    }
}

#[test]
fn too_few_nodes_is_a_usage_error() {
    assert_eq!(run(&["solve", "sine_tracking", "--nodes", "3"]).status.code(), Some(2));
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(run(&["solve", "no_such_problem", "--nodes", "8"]).status.code(), Some(2));
    assert_eq!(run(&["solve", "cubic_chain", "--nodes", "eight"]).status.code(), Some(2));
    assert_eq!(run(&["solve", "cubic_chain", "--nodes", "8,10"]).status.code(), Some(2));
    assert_eq!(run(&["solve", "cubic_chain", "--nodes", "201"]).status.code(), Some(2));
    assert_eq!(run(&["solve", "cubic_chain", "--nodes", "8", "--cost-mode", "simpson"]).status.code(), Some(2));
    assert_eq!(run(&["sweep", "counterexample", "--nodes", "8", "--demo-alpha", "-1"]).status.code(), Some(2));
}

#[test]
fn solve_cubic_chain_at_eighteen_nodes() {
    let o = run(&["solve", "cubic_chain", "--nodes", "18"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(field(&text, "cost error") <= 1e-6, "{text}");
    assert!(field(&text, "control error") <= 1e-5, "{text}");
}

#[test]
fn solve_sine_tracking_at_sixteen_nodes() {
    let o = run(&["solve", "sine_tracking", "--nodes", "16"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(field(&stdout(&o), "cost error") <= 1e-5);
}

#[test]
fn solve_writes_nodal_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.csv");
    let o = run(&["solve", "cubic_chain", "--nodes", "10", "--out", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,x1,x2,u");
    assert_eq!(lines.len(), 12);
    let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    let last: Vec<f64> = lines[11].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!((first[0], last[0]), (0.0, 2.0));
    // x(0) = (0, 1)
    assert!(first[1].abs() < 1e-9 && (first[2] - 1.0).abs() < 1e-9);
}

#[test]
fn solve_csv_format_is_a_one_row_report() {
    let o = run(&["solve", "cubic_chain", "--nodes", "12", "--format", "csv", "--cost-mode", "exact"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "problem,N,cost_error,control_error,defect,status,wall_ms");
    assert!(lines[1].starts_with("cubic_chain,12,"));
}

#[test]
fn sine_sweep_csv_matches_node_order_and_is_deterministic() {
    let args = ["sweep", "sine_tracking", "--nodes", "4,6,8,10,12,14,16", "--format", "csv"];
    let a = run(&args);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let csv = stdout(&a);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 8);
    let nodes: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(nodes, ["4", "6", "8", "10", "12", "14", "16"]);
    let b = run(&args);
    assert_eq!(without_wall_time(&csv), without_wall_time(&stdout(&b)));
}

#[test]
fn sweep_out_file_holds_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    let o = run(&["sweep", "cubic_chain", "--nodes", "8..18:2", "--out", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("exponential"), "{text}");
    let csv = std::fs::read_to_string(&path).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn cubic_sweep_flags_exponential_decay() {
    let o = run(&["sweep", "cubic_chain", "--nodes", "8..18", "--warm-chain"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let fit = text.lines().find(|l| l.starts_with("fit over")).unwrap();
    assert!(fit.ends_with("exponential"), "{fit}");
}

#[test]
fn counterexample_family_decreases() {
    let o = run(&["sweep", "counterexample", "--nodes", "8", "--demo-alpha", "1,10,100,1000"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let values: Vec<f64> = text
        .lines()
        .skip_while(|l| !l.starts_with("alpha"))
        .skip(1)
        .take(4)
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 4);
    assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    assert!(values.iter().all(|v| *v > 0.0));
    assert!(text.contains("optimal"));
}
