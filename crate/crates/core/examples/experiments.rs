//! Runs the desk-scale experiments and prints their results as JSON.
//!
//! Usage: `cargo run --release --example experiments -- [completeness|bias|camera] [setup.json]`

use std::time::Instant;

use gain_core::experiments::{self, BiasSetup, CameraSetup, CompletenessSetup};

fn load<T: serde::de::DeserializeOwned + Default>(path: Option<&String>) -> T {
    match path {
        Some(p) => serde_json::from_slice(&std::fs::read(p).expect("read setup")).expect("parse setup"),
        None => T::default(),
    }
}

fn main() -> gain_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let which = args.first().map(String::as_str).unwrap_or("completeness");
    if args.get(1).map(String::as_str) == Some("--defaults") {
        let json = match which {
            "completeness" => serde_json::to_string_pretty(&CompletenessSetup::default()),
            "bias" => serde_json::to_string_pretty(&BiasSetup::default()),
            _ => serde_json::to_string_pretty(&CameraSetup::default()),
        };
        println!("{}", json.expect("setup serializes"));
        return Ok(());
    }
    let t = Instant::now();
    let json = match which {
        "completeness" => serde_json::to_string_pretty(&experiments::completeness(&load::<CompletenessSetup>(args.get(1)))?),
        "bias" => serde_json::to_string_pretty(&experiments::bias(&load::<BiasSetup>(args.get(1)))?),
        "camera" => serde_json::to_string_pretty(&experiments::camera(&load::<CameraSetup>(args.get(1)))?),
        other => {
            eprintln!("unknown experiment {other:?}");
            std::process::exit(2);
        }
    };
    println!("{}", json.expect("result serializes"));
    eprintln!("{which}: {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
