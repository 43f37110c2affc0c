#![no_main]
use libfuzzer_sys::fuzz_target;

use goalnav::teleop::{ClientMessage, InputPayload};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ClientMessage::Input(req)) = ClientMessage::parse(text) {
        match req.payload().expect("parse validates the payload") {
            InputPayload::Vector(v) => assert!(v.is_finite()),
            InputPayload::Direction(_) => {}
        }
    }
});
