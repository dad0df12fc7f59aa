//! Seal a few boxes with a write capability and read them back with the
//! paired read capability.

use funion::bacap::{generate_capability, open, seal, BacapError, CTX_IN, CTX_OUT};
use rand::rngs::OsRng;

fn main() -> Result<(), BacapError> {
    let (write, read) = generate_capability(&mut OsRng);
    println!("root public key: {}", hex::encode(write.root_public_bytes()));

    for index in 1..=3 {
        let msg = format!("message number {index}");
        let record = seal(&write, index, CTX_IN, msg.as_bytes())?;
        let back = open(&read, index, CTX_IN, &record)?;
        println!(
            "box {index}: id {}… {} wire bytes -> {:?}",
            &hex::encode(record.box_id)[..16],
            record.wire_len(),
            String::from_utf8_lossy(&back)
        );
    }

    // The same index under the other context is a different box.
    let record = seal(&write, 1, CTX_IN, b"input side")?;
    match open(&read, 1, CTX_OUT, &record) {
        Err(BacapError::WrongBox) => println!("CTX_OUT keys do not open a CTX_IN box"),
        other => println!("unexpected: {other:?}"),
    }
    Ok(())
}
