//! Writes tests/golden/handshake.txt from a fixed-seed handshake.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tomen::crypto::{client_create_payload, client_finish, gen_keypair, relay_respond};

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let identity = gen_keypair(&mut rng);
    let eph = gen_keypair(&mut rng);
    let create = client_create_payload(&eph);
    let (created, _) = relay_respond(&create, &identity, &mut rng).expect("handshake");
    let keys = client_finish(&eph, &created, &identity.public()).expect("finish");
    let lines = [
        ("identity_public", hex::encode(identity.public().as_bytes())),
        ("create_payload", hex::encode(create)),
        ("created_payload", hex::encode(created)),
        ("forward_key", hex::encode(keys.forward_key)),
        ("backward_key", hex::encode(keys.backward_key)),
    ];
    let out: String = lines.iter().map(|(k, v)| format!("{k} {v}\n")).collect();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/handshake.txt");
    std::fs::write(path, out).expect("write golden");
    println!("wrote {path}");
}
