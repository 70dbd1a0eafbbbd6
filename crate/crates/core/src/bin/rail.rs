//! `rail`: run a node, edit maps, query, and run simulations.
//!
//! Exit codes: 0 ok, 1 operational error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use base64::Engine;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use rail::config::Config;
use rail::discovery::Role;
use rail::framing::{AdminOp, Response};
use rail::geometry::{GeometryPrimitive, Pose6D};
use rail::graph::{FrameId, ObjectId, PathConstraints, TransformObservation};
use rail::model::EnvironmentModel;
use rail::objects::{AttributeMutation, AttributePredicate, ObjectUpsert};
use rail::query::Query;
use rail::server::{discover, Client, Server};
use rail::sim::{run_scenario, Scenario};
use rail::snapshot::{export_snapshot, import_snapshot, parse_snapshot, to_canonical_json};

#[derive(Parser)]
#[command(name = "rail", version, about = "Dynamic semantic spatial model service")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a node.
    Server {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of ingest,query,mgmt.
        #[arg(long, default_value = "ingest,query,mgmt")]
        roles: String,
    },
    /// Create and edit maps, on a snapshot file or a running node.
    Mapctl {
        #[command(flatten)]
        target: Target,
        #[command(subcommand)]
        op: MapOp,
    },
    /// Run one query against a node.
    Query {
        #[command(flatten)]
        target: Target,
        /// Keep the query open and print deltas.
        #[arg(long, global = true)]
        follow: bool,
        /// With --follow, stop after this many delta frames.
        #[arg(long, global = true)]
        count: Option<usize>,
        #[command(subcommand)]
        op: QueryOp,
    },
    /// Deterministic simulation.
    Sim {
        #[command(subcommand)]
        op: SimOp,
    },
}

#[derive(Args)]
struct Target {
    /// Query endpoint of a node; discovered from announcements if omitted.
    #[arg(long, global = true)]
    addr: Option<String>,
    /// Operate offline on this snapshot file instead of a node (mapctl only).
    #[arg(long, global = true)]
    file: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = rail::discovery::DEFAULT_DISCOVERY_PORT)]
    discovery_port: u16,
}

#[derive(Subcommand)]
enum MapOp {
    /// Load a snapshot file.
    Import { snapshot: PathBuf },
    /// Print the map as a canonical snapshot.
    Export {
        #[arg(long)]
        include_data: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Create or update an object.
    AddObject {
        id: String,
        /// Attribute assignment `path=<json>`; repeatable.
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Geometry as JSON, e.g. '{"shape":"sphere","radius":0.5}'.
        #[arg(long)]
        geometry: Option<String>,
    },
    /// Add a transform edge, e.g. a sensor calibration.
    AddEdge {
        parent: String,
        child: String,
        /// Pose JSON '{"t":[x,y,z],"q":[w,x,y,z]}'.
        #[arg(long)]
        pose: String,
        #[arg(long, default_value = "mapctl")]
        provider: String,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.001)]
        resolution: f64,
        #[arg(long, default_value_t = 0)]
        time_us: u64,
        #[arg(long, default_value_t = 0)]
        seq: u64,
    },
}

#[derive(Subcommand)]
enum QueryOp {
    GetObject { id: String },
    /// Predicate JSON, e.g. '[{"path":"type","op":"eq","value":"pallet"}]'.
    FindObjects { predicate: String },
    GetTransform {
        src: String,
        dst: String,
        /// Constraints JSON, e.g. '{"max_hops":4}'.
        #[arg(long)]
        constraints: Option<String>,
    },
    RangeQuery {
        frame: String,
        /// Query center as x,y,z.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        center: Vec<f64>,
        #[arg(long)]
        radius: f64,
        #[arg(long)]
        predicate: Option<String>,
    },
    GetBlob { hash: String },
    /// A complete query as JSON, e.g. '{"op":"get_object","object":"x"}'.
    Raw { json: String },
}

#[derive(Subcommand)]
enum SimOp {
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
enum Fail {
    Usage(String),
    Op(String),
}

type R<T> = Result<T, Fail>;

fn op<E: std::fmt::Display>(e: E) -> Fail {
    Fail::Op(e.to_string())
}

fn usage<E: std::fmt::Display>(e: E) -> Fail {
    Fail::Usage(e.to_string())
}

fn json_arg<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> R<T> {
    serde_json::from_str(text).map_err(|e| Fail::Usage(format!("{what}: {e}")))
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Op(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> R<()> {
    match cmd {
        Cmd::Server { config, roles } => {
            let roles = roles
                .split(',')
                .filter(|r| !r.is_empty())
                .map(|r| r.trim().parse::<Role>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(usage)?;
            let cfg = Config::load(config.as_deref()).map_err(op)?;
            let server = Server::start(cfg, &roles).map_err(op)?;
            if let Some(a) = server.query_addr() {
                log::info!("query endpoint {a}");
            }
            if let Some(a) = server.ingest_addr() {
                log::info!("ingest endpoint {a}");
            }
            server.wait();
            Ok(())
        }
        Cmd::Mapctl { target, op } => mapctl(target, op),
        Cmd::Query { target, follow, count, op } => query(target, follow, count, op),
        Cmd::Sim { op: SimOp::Run { scenario, seed, out } } => {
            let text = std::fs::read_to_string(&scenario).map_err(op)?;
            let mut s = Scenario::from_json(&text).map_err(usage)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let report = run_scenario(&s).map_err(usage)?.to_canonical_json();
            emit(out.as_deref(), &report)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> R<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(op),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn connect(t: &Target) -> R<Client> {
    let addr = match &t.addr {
        Some(a) => a.clone(),
        None => discover("0.0.0.0", t.discovery_port, Role::Query, Duration::from_secs(3)).map_err(op)?.addr,
    };
    Client::connect(&addr).map_err(|e| Fail::Op(format!("{addr}: {e}")))
}

fn print_response(r: &Response) -> R<()> {
    println!("{}", rail::canonical_json(r));
    if r.ok {
        Ok(())
    } else {
        Err(Fail::Op(format!("{}: {}", r.error.as_deref().unwrap_or("error"), r.reason.as_deref().unwrap_or(""))))
    }
}

fn admin_op(m: MapOp) -> R<AdminOp> {
    Ok(match m {
        MapOp::Import { snapshot } => {
            let text = std::fs::read_to_string(&snapshot).map_err(op)?;
            AdminOp::Import { snapshot: parse_snapshot(&text).map_err(usage)? }
        }
        MapOp::Export { include_data, .. } => AdminOp::Export { include_data },
        MapOp::AddObject { id, sets, geometry } => {
            let object = ObjectId::new(&id).map_err(usage)?;
            let mutations = sets
                .iter()
                .map(|s| {
                    let (path, value) = s.split_once('=').ok_or_else(|| usage(format!("--set {s}: expected path=json")))?;
                    let value: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.into()));
                    Ok(AttributeMutation::set(path, value))
                })
                .collect::<R<Vec<_>>>()?;
            let geometry = geometry.map(|g| json_arg::<GeometryPrimitive>("--geometry", &g)).transpose()?;
            AdminOp::AddObject { object, mutations, geometry }
        }
        MapOp::AddEdge { parent, child, pose, provider, sigma, resolution, time_us, seq } => {
            let pose: Pose6D = json_arg("--pose", &pose)?;
            let edge = TransformObservation {
                parent: FrameId::new(&parent).map_err(usage)?,
                child: FrameId::new(&child).map_err(usage)?,
                provider,
                pose,
                sigma,
                resolution,
                time_us,
                seq,
            };
            AdminOp::AddEdge { edge }
        }
    })
}

fn mapctl(t: Target, map_op: MapOp) -> R<()> {
    let out = match &map_op {
        MapOp::Export { out, .. } => out.clone(),
        _ => None,
    };
    let req = admin_op(map_op)?;
    let Some(file) = &t.file else {
        let mut c = connect(&t)?;
        let export = matches!(req, AdminOp::Export { .. });
        let r = c.admin(req).map_err(op)?;
        if let (true, true, Some(v)) = (export, r.ok, r.result.clone()) {
            let snap = serde_json::from_value(v).map_err(op)?;
            return emit(out.as_deref(), &(to_canonical_json(&snap) + "\n"));
        }
        return print_response(&r);
    };
    // Offline: load the file, apply, write back.
    let model = EnvironmentModel::default();
    if file.exists() {
        let text = std::fs::read_to_string(file).map_err(op)?;
        import_snapshot(&model, &parse_snapshot(&text).map_err(op)?).map_err(op)?;
    }
    match req {
        AdminOp::Export { include_data } => {
            return emit(out.as_deref(), &(to_canonical_json(&export_snapshot(&model, include_data)) + "\n"));
        }
        AdminOp::Import { snapshot } => {
            let counts = import_snapshot(&model, &snapshot).map_err(op)?;
            println!("{}", rail::canonical_json(&counts));
        }
        AdminOp::AddObject { object, mutations, geometry } => {
            let c = model
                .objects
                .upsert_object(&object, ObjectUpsert { mutations, geometry, ..ObjectUpsert::default() })
                .map_err(op)?;
            println!("{}", rail::canonical_json(&serde_json::json!({ "rev": c.rev, "seq": c.seq })));
        }
        AdminOp::AddEdge { edge } => {
            let u = model.graph.upsert_edge(edge).map_err(op)?;
            println!("{}", rail::canonical_json(&u));
        }
        AdminOp::PutBlob { data, media_type } => {
            let bytes = base64::engine::general_purpose::STANDARD.decode(data).map_err(usage)?;
            model.blobs.put_blob(&bytes, &media_type).map_err(op)?;
        }
        AdminOp::Replicate { .. } => return Err(usage("replicate needs a node")),
    }
    std::fs::write(file, to_canonical_json(&export_snapshot(&model, true)) + "\n").map_err(op)
}

fn build_query(q: QueryOp) -> R<Query> {
    let frame = |s: &str| FrameId::new(s).map_err(usage);
    let q = match q {
        QueryOp::GetObject { id } => Query::GetObject { id: ObjectId::new(&id).map_err(usage)? },
        QueryOp::FindObjects { predicate } => {
            Query::FindObjects { predicate: json_arg::<AttributePredicate>("predicate", &predicate)? }
        }
        QueryOp::GetTransform { src, dst, constraints } => Query::GetTransform {
            src: frame(&src)?,
            dst: frame(&dst)?,
            constraints: constraints
                .map(|c| json_arg::<PathConstraints>("--constraints", &c))
                .transpose()?
                .unwrap_or_default(),
        },
        QueryOp::RangeQuery { frame: f, center, radius, predicate } => Query::RangeQuery {
            frame: frame(&f)?,
            center: <[f64; 3]>::try_from(center).map_err(|_| usage("--center: expected x,y,z"))?,
            radius,
            predicate: predicate
                .map(|p| json_arg("--predicate", &p))
                .transpose()?
                .unwrap_or_else(AttributePredicate::all),
        },
        QueryOp::GetBlob { hash } => Query::GetBlob { hash },
        QueryOp::Raw { json } => json_arg("query", &json)?,
    };
    q.validate().map_err(usage)?;
    Ok(q)
}

fn query(t: Target, follow: bool, count: Option<usize>, q: QueryOp) -> R<()> {
    let q = build_query(q)?;
    let mut c = connect(&t)?;
    if !follow {
        return print_response(&c.query(q).map_err(op)?);
    }
    if !q.followable() {
        return Err(usage(format!("{} cannot be followed", q.name())));
    }
    let first = c.follow(q).map_err(op)?;
    println!("{}", rail::canonical_json(&first));
    let mut seen = 0;
    while count.is_none_or(|n| seen < n) {
        match c.next_frame().map_err(op)? {
            Some(f) => {
                println!("{}", rail::canonical_json(&f));
                seen += 1;
                if f.get("error").and_then(Value::as_str) == Some("SubscriptionOverflow") {
                    return Err(Fail::Op("subscription overflowed".into()));
                }
            }
            None => return Err(Fail::Op("connection closed".into())),
        }
    }
    Ok(())
}
