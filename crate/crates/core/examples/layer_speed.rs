use sparsegrad::harness::{layer_speed_benchmark, SpeedSpec};

fn main() {
    let report = layer_speed_benchmark(&SpeedSpec::default()).expect("benchmark");
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
}
