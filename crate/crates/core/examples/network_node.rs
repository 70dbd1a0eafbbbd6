//! A real node on loopback sockets: UDP ingest, the framed consumer protocol
//! and a followed query.

use std::time::Duration;

use rail::config::Config;
use rail::discovery::Role;
use rail::framing::AdminOp;
use rail::graph::{FrameId, ObjectId, PathConstraints};
use rail::query::Query;
use rail::server::{send_datagram, Client, Server};

const QR: &str = r#"{"v":1,"provider":{"id":"foo","type":"camera"},"seq":12,"time_us":1700000000000000,"observations":[{"item":"detection","kind":"marker.QR","ext_id":"bar","pose":{"t":[0.1,0.2,0.3],"q":[1.0,0.0,0.0,0.0]},"sigma":0.01,"res":0.001}]}"#;

fn main() {
    let mut cfg = Config::default();
    cfg.network.bind = "127.0.0.1".into();
    cfg.network.broadcast_addr = "127.0.0.1".into();
    cfg.network.ingest_port = 0;
    cfg.network.query_port = 0;
    let server = Server::start(cfg, &Role::ALL).expect("start node");
    let query = server.query_addr().unwrap().to_string();
    println!("ingest {} query {}", server.ingest_addr().unwrap(), query);

    let mut admin = Client::connect(&query).unwrap();
    let r = admin
        .admin(AdminOp::AddObject {
            object: ObjectId::new("pallet-17").unwrap(),
            mutations: vec![rail::objects::AttributeMutation::set("marker.QR.id", "bar")],
            geometry: None,
        })
        .unwrap();
    println!("add_object -> {}", rail::canonical_json(&r));

    let mut consumer = Client::connect(&query).unwrap();
    consumer.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let q = Query::GetTransform {
        src: FrameId::new("foo").unwrap(),
        dst: FrameId::new("pallet-17").unwrap(),
        constraints: PathConstraints::default(),
    };
    println!("follow -> {}", rail::canonical_json(&consumer.follow(q).unwrap()));

    send_datagram(&server.ingest_addr().unwrap().to_string(), QR.as_bytes()).unwrap();
    if let Ok(Some(delta)) = consumer.next_frame() {
        println!("delta  -> {}", rail::canonical_json(&delta));
    }
    server.shutdown();
}
