use std::collections::BTreeMap;

use nodepower_core::bus::{BusConfig, EventKind};
use nodepower_core::network::Network;
use nodepower_core::node::{DipSwitches, NodeAction, NodeSpec, NodeState, HUMIDITY_MAX};
use nodepower_core::protocol::{
    decode_response, encode_command, resync_scan, CommandCode, Frame, ResponseFrame, STX,
};
use proptest::prelude::*;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn feed(node: &mut NodeState, bytes: &[u8]) -> Vec<NodeAction> {
    bytes.iter().filter_map(|&b| node.on_byte(b)).collect()
}

#[test]
fn selective_execution_across_random_populations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let mut pool: Vec<u8> = (1..=254).collect();
        pool.shuffle(&mut rng);
        let population = &pool[..32];
        let specs: Vec<NodeSpec> = population.iter().map(|&a| NodeSpec::new(a)).collect();
        let mut net = Network::new(BusConfig::default(), &specs).unwrap();
        let target = population[rng.random_range(0..32)];
        let cmd = CommandCode::ALL[rng.random_range(0..5)];
        net.transmit_from_master(&encode_command(&Frame::new(target, cmd)).unwrap())
            .unwrap();
        net.advance(200_000);
        let journal = net.drain_journal();
        assert_eq!(journal.len(), 1);
        assert_eq!(journal[0].address, target);
        let id = net.node_at(target).unwrap();
        assert_eq!(journal[0].node, id);
        for (nid, ctl) in net.nodes() {
            let d = ctl.state.diagnostics();
            assert_eq!(d.frames_seen, 1);
            assert_eq!(d.frames_executed, u64::from(nid == id));
        }
    }
}

#[test]
fn garbage_never_triggers_execution_beyond_embedded_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2_000 {
        let address: u8 = rng.random_range(1..=254);
        let mut stream: Vec<u8> = Vec::new();
        for _ in 0..rng.random_range(0..10) {
            match rng.random_range(0..3) {
                0 => {
                    let dn = if rng.random_bool(0.5) {
                        address
                    } else {
                        rng.random()
                    };
                    let f = [
                        STX,
                        dn,
                        CommandCode::ALL[rng.random_range(0..5)].code(),
                        0x03,
                    ];
                    stream.extend(f);
                }
                _ => {
                    for _ in 0..rng.random_range(1..5) {
                        stream.push(match rng.random_range(0..3) {
                            0 => STX,
                            1 => address,
                            _ => rng.random(),
                        });
                    }
                }
            }
        }
        let expected: Vec<Frame> = resync_scan(&stream)
            .frames
            .into_iter()
            .map(|(_, f)| f)
            .filter(|f| f.device_number == address || f.device_number == 0)
            .collect();
        let mut node = NodeState::new(&NodeSpec::new(address), 0);
        let got: Vec<Frame> = feed(&mut node, &stream)
            .iter()
            .map(|a| *a.frame())
            .collect();
        assert_eq!(got, expected, "{stream:02x?}");
    }
}

proptest! {
    #[test]
    fn random_bytes_match_scan_oracle(
        address in 1u8..=254,
        stream in proptest::collection::vec(
            prop_oneof![Just(STX), Just(0x03u8), Just(0x01u8), Just(0x10u8), any::<u8>()], 0..80),
    ) {
        let expected: Vec<Frame> = resync_scan(&stream)
            .frames
            .into_iter()
            .map(|(_, f)| f)
            .filter(|f| f.device_number == address || f.device_number == 0)
            .collect();
        let mut node = NodeState::new(&NodeSpec::new(address), 0);
        let got: Vec<Frame> = feed(&mut node, &stream).iter().map(|a| *a.frame()).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn sensor_readings_stay_in_band(temp in 0u16..2000, humid in 0u16..=HUMIDITY_MAX, seed: u64) {
        let spec = NodeSpec { temp_baseline: temp, humid_baseline: humid, ..NodeSpec::new(3) };
        let mut node = NodeState::new(&spec, seed);
        for _ in 0..20 {
            let t = node.execute(CommandCode::ReadTemperature).payload;
            let t = u16::from_be_bytes([t[0], t[1]]);
            prop_assert!(t.abs_diff(temp) <= 5);
            let h = node.execute(CommandCode::ReadHumidity).payload;
            let h = u16::from_be_bytes([h[0], h[1]]);
            prop_assert!(h.abs_diff(humid) <= 5 && h <= HUMIDITY_MAX);
        }
    }
}

#[test]
fn dip_change_applies_to_next_frame() {
    let mut node = NodeState::new(&NodeSpec::new(5), 0);
    let to = |a| encode_command(&Frame::new(a, CommandCode::PowerOn)).unwrap();
    assert_eq!(feed(&mut node, &to(5)).len(), 1);
    node.dip = DipSwitches::from_address(9);
    assert!(feed(&mut node, &to(5)).is_empty());
    assert_eq!(feed(&mut node, &to(9)).len(), 1);
    assert_eq!(node.display().to_string(), "0.09");
}

#[test]
fn dip_change_mid_frame_uses_value_at_completion() {
    let mut node = NodeState::new(&NodeSpec::new(5), 0);
    let bytes = encode_command(&Frame::new(6, CommandCode::StatusQuery)).unwrap();
    feed(&mut node, &bytes[..2]);
    node.dip.toggle(0);
    node.dip.toggle(1);
    assert_eq!(node.read_dip(), 6);
    let actions = feed(&mut node, &bytes[2..]);
    assert!(matches!(&actions[..], [NodeAction::Reply(_, r)] if r.device_number == 6));
}

#[test]
fn reply_timing_and_content_on_the_wire() {
    let mut net = Network::new(BusConfig::default(), &[NodeSpec::new(12)]).unwrap();
    let bt = net.byte_time_us();
    net.transmit_from_master(&encode_command(&Frame::new(12, CommandCode::PowerOn)).unwrap())
        .unwrap();
    let events = net.advance(100_000);
    let node_port = net.port_of(0).unwrap();
    let sent: Vec<(u64, u8)> = events
        .iter()
        .filter(|e| e.kind == EventKind::ByteSent && e.port_id == node_port)
        .map(|e| (e.timestamp_us, e.value.unwrap()))
        .collect();
    let bytes: Vec<u8> = sent.iter().map(|s| s.1).collect();
    assert_eq!(
        decode_response(&bytes).unwrap(),
        ResponseFrame::ack(12, CommandCode::PowerOn)
    );
    let times: Vec<u64> = sent.iter().map(|s| s.0).collect();
    let expected: Vec<u64> = (0..6).map(|i| (6 + i) * bt).collect();
    assert_eq!(times, expected);
    assert!(net.node(0).unwrap().state.relay_on);
}

#[test]
fn duplicate_address_replies_collide() {
    let mut net = Network::new(
        BusConfig::default(),
        &[NodeSpec::new(7), NodeSpec::new(7), NodeSpec::new(8)],
    )
    .unwrap();
    net.transmit_from_master(&encode_command(&Frame::new(7, CommandCode::StatusQuery)).unwrap())
        .unwrap();
    let mut received = Vec::new();
    let events = net.run(100_000, |_, r| {
        received.push(r);
        std::ops::ControlFlow::Continue(())
    });
    assert!(events.iter().any(|e| e.kind == EventKind::Collision));
    assert!(received.iter().all(|r| r.is_err()));
    assert_eq!(net.drain_journal().len(), 2);
}

#[test]
fn broadcast_executes_everywhere_silently() {
    let specs: Vec<NodeSpec> = (1..=16).map(NodeSpec::new).collect();
    let mut net = Network::new(BusConfig::default(), &specs).unwrap();
    for cmd in [
        CommandCode::PowerOn,
        CommandCode::StatusQuery,
        CommandCode::ReadTemperature,
    ] {
        net.transmit_from_master(&encode_command(&Frame::broadcast(cmd)).unwrap())
            .unwrap();
        let events = net.advance(100_000);
        let master = net.master_port().unwrap();
        assert!(events
            .iter()
            .filter(|e| e.kind == EventKind::ByteSent)
            .all(|e| e.port_id == master));
        let by_node: BTreeMap<usize, usize> =
            net.drain_journal()
                .iter()
                .fold(BTreeMap::new(), |mut m, e| {
                    *m.entry(e.node).or_default() += 1;
                    m
                });
        assert_eq!(by_node.len(), 16);
        assert!(by_node.values().all(|&n| n == 1));
    }
    assert!(net.nodes().all(|(_, c)| c.state.relay_on));
}

#[test]
fn reserved_dip_setting_is_unreachable() {
    let mut node = NodeState::new(&NodeSpec::new(255), 0);
    assert_eq!(node.display().to_string(), "   ");
    assert!(feed(&mut node, &[STX, 255, 0x01, 0x03]).is_empty());
    // Still obeys broadcasts.
    assert_eq!(feed(&mut node, &[STX, 0, 0x01, 0x03]).len(), 1);
    assert_eq!(node.display().to_string(), " .  ");
}
