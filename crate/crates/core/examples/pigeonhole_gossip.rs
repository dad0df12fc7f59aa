//! Write records through a courier, then let anti-entropy gossip bring
//! every placed replica up to date.

use funion::bacap::{seal, WriteCapability, CTX_IN};
use funion::pigeonhole::{gossip_all, replica_set, select_replicas, Courier, CourierReply, Envelope, PlacementConfig};

fn main() {
    let cfg = PlacementConfig::new(5, 3, 64).expect("valid placement");
    let mut replicas = replica_set(5);
    let mut courier = Courier::new();
    let writer = WriteCapability::from_seed(&[9; 64]);

    // Take two replicas down while writing.
    replicas[0].set_online(false);
    replicas[1].set_online(false);
    for index in 1..=10u64 {
        let rec = seal(&writer, index, CTX_IN, format!("record {index}").as_bytes()).unwrap();
        let placed: Vec<u32> = select_replicas(&rec.box_id, &cfg).iter().map(|r| r.0).collect();
        let reply = courier.forward(index as f64, &Envelope::put(rec, &cfg, index), &mut replicas);
        match reply {
            Ok(CourierReply::Put { acks, .. }) => println!("record {index}: placed on {placed:?}, {acks} acks"),
            other => println!("record {index}: placed on {placed:?}, {other:?}"),
        }
    }
    for r in &mut replicas {
        r.set_online(true);
    }
    let before: Vec<usize> = replicas.iter().map(|r| r.len()).collect();
    let copied = gossip_all(&mut replicas, &cfg);
    let after: Vec<usize> = replicas.iter().map(|r| r.len()).collect();
    println!("records per replica before gossip {before:?}, after {after:?} ({copied} copies)");
    println!("courier log: {} entries of (t, size) only", courier.log().len());
}
