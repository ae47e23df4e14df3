use splatlink_core::codec::{self, FramePacket, MsgType, StreamParser, FLAG_LZ4, HEADER_LEN};
use splatlink_core::params::{MotionParams, PARAM_LEN};

fn fixture(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap();
    hex::decode(text.split_whitespace().collect::<String>()).unwrap()
}

fn raw_values() -> [f64; PARAM_LEN] {
    std::array::from_fn(|i| ((i * i * 7 + i * 13) % 1009) as f64 / 64.0 - 7.0)
}

#[test]
fn raw_frame_matches_golden_bytes() {
    let golden = fixture("param_frame_raw.hex");
    assert_eq!(golden.len(), 451);
    let p = MotionParams::from_values(42, 1_400_000, raw_values()).unwrap();
    let pkt = codec::encode_frame(&p).unwrap();
    assert!(!pkt.is_compressed());
    assert_eq!(pkt.to_bytes(), golden);
}

#[test]
fn golden_header_fields() {
    let b = fixture("param_frame_raw.hex");
    assert_eq!(&b[0..4], b"M3TR");
    assert_eq!(b[4], 1);
    assert_eq!(b[5], MsgType::ParamFrame as u8);
    assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 42);
    assert_eq!(u64::from_le_bytes(b[10..18].try_into().unwrap()), 1_400_000);
    assert_eq!(b[18], 0);
    assert_eq!(u16::from_le_bytes([b[19], b[20]]), 430);
    // first value: (0 % 1009) / 64 - 7 = -7.0 = 0xc700 in binary16
    assert_eq!(&b[HEADER_LEN..HEADER_LEN + 2], &[0x00, 0xc7]);
}

#[test]
fn compressed_frame_matches_golden_bytes() {
    let golden = fixture("param_frame_lz4.hex");
    let mut v = [0.0; PARAM_LEN];
    v[3] = 0.25;
    v[4] = -0.5;
    v[72] = 0.125;
    v[80] = 1.0;
    let p = MotionParams::from_values(7, 116_666, v).unwrap();
    let pkt = codec::encode_frame(&p).unwrap();
    assert_eq!(pkt.flags, FLAG_LZ4);
    assert_eq!(pkt.to_bytes(), golden);
    let back = codec::decode_frame(&FramePacket::from_bytes(&golden).unwrap()).unwrap();
    assert_eq!(back, p);
}

#[test]
fn golden_stream_splits_at_any_boundary() {
    let mut stream = fixture("param_frame_lz4.hex");
    stream.extend(fixture("param_frame_raw.hex"));
    for cut in 0..stream.len() {
        let mut parser = StreamParser::new();
        let mut got = Vec::new();
        for part in [&stream[..cut], &stream[cut..]] {
            parser.push(part);
            while let Some(p) = parser.next_packet().unwrap() {
                got.push(p.frame_index);
            }
        }
        assert_eq!(got, vec![7, 42], "cut at {cut}");
        assert_eq!(parser.buffered(), 0);
    }
}

#[test]
fn corrupted_golden_packets_are_rejected() {
    let golden = fixture("param_frame_raw.hex");
    let mut bad_magic = golden.clone();
    bad_magic[0] = b'X';
    assert!(matches!(FramePacket::from_bytes(&bad_magic), Err(codec::CodecError::Protocol(_))));
    let mut bad_flags = golden.clone();
    bad_flags[18] = 0x80;
    assert!(matches!(FramePacket::from_bytes(&bad_flags), Err(codec::CodecError::Protocol(_))));
    assert!(matches!(FramePacket::from_bytes(&golden[..450]), Err(codec::CodecError::Framing { needed: 451, available: 450 })));
    let lz4 = fixture("param_frame_lz4.hex");
    // a truncated block whose length field agrees with the cut
    let mut truncated = lz4[..lz4.len() - 4].to_vec();
    let len = (truncated.len() - HEADER_LEN) as u16;
    truncated[19..21].copy_from_slice(&len.to_le_bytes());
    let pkt = FramePacket::from_bytes(&truncated).unwrap();
    assert!(codec::decode_frame(&pkt).is_err());
}
