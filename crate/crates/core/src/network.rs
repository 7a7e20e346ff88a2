//! A bus populated with one master port and a set of emulated nodes.
//!
//! [`Network::run`] is the single place where simulated time moves: bytes
//! delivered to node ports are fed to their state machines (which may
//! schedule replies), and bytes delivered to the master port go through a
//! [`ResponseAssembler`] whose output is handed to the caller.

use std::collections::HashMap;
use std::ops::ControlFlow;

use crate::bus::{Bus, BusConfig, BusError, BusEvent, Micros, PortId, PortKind};
use crate::node::{NodeAction, NodeController, NodeSpec, NodeState};
use crate::protocol::{Frame, ProtocolError, ResponseAssembler, ResponseFrame};

/// Index of a node within its [`Network`]. Stable for the network's lifetime.
pub type NodeId = usize;

/// A command a node actually executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Execution {
    pub at_us: Micros,
    pub node: NodeId,
    /// DIP address at the moment of execution.
    pub address: u8,
    pub frame: Frame,
}

/// What the master port received.
pub type Reception = Result<ResponseFrame, ProtocolError>;

pub struct Network {
    bus: Bus,
    master_port: Option<PortId>,
    nodes: Vec<NodeController>,
    port_index: HashMap<PortId, NodeId>,
    master_rx: ResponseAssembler,
    last_master_rx: Option<Micros>,
    journal: Vec<Execution>,
}

/// Per-node noise seed when the node spec does not pin one.
pub fn derive_node_seed(bus_seed: u64, address: u8) -> u64 {
    bus_seed ^ (u64::from(address) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Network {
    /// Builds a bus with the master on the first port and one plugged node
    /// per spec, in order.
    pub fn new(config: BusConfig, nodes: &[NodeSpec]) -> Result<Network, BusError> {
        let mut bus = Bus::new(config)?;
        let master_port = bus.attach(PortKind::Master)?;
        let mut net = Network {
            bus,
            master_port: Some(master_port),
            nodes: Vec::new(),
            port_index: HashMap::new(),
            master_rx: ResponseAssembler::new(),
            last_master_rx: None,
            journal: Vec::new(),
        };
        for spec in nodes {
            net.add_node(spec)?;
        }
        Ok(net)
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn bus_mut(&mut self) -> &mut Bus {
        &mut self.bus
    }

    pub fn now(&self) -> Micros {
        self.bus.now()
    }

    pub fn byte_time_us(&self) -> Micros {
        self.bus.byte_time_us()
    }

    pub fn master_port(&self) -> Option<PortId> {
        self.master_port.filter(|&p| self.bus.is_attached(p))
    }

    pub fn detach_master(&mut self) -> Result<(), BusError> {
        match self.master_port.take() {
            Some(p) => self.bus.detach(p),
            None => Ok(()),
        }
    }

    pub fn attach_master(&mut self) -> Result<PortId, BusError> {
        if let Some(p) = self.master_port() {
            return Ok(p);
        }
        let p = self.bus.attach(PortKind::Master)?;
        self.master_port = Some(p);
        Ok(p)
    }

    pub fn add_node(&mut self, spec: &NodeSpec) -> Result<NodeId, BusError> {
        let seed = derive_node_seed(self.bus.config().seed, spec.address);
        let mut ctl = NodeController::new(NodeState::new(spec, seed));
        let port = ctl.plug(&mut self.bus)?;
        let id = self.nodes.len();
        self.nodes.push(ctl);
        self.port_index.insert(port, id);
        Ok(id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeController> {
        self.nodes.get(id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeController> {
        self.nodes.get_mut(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &NodeController)> {
        self.nodes.iter().enumerate()
    }

    /// Nodes whose DIP switches currently read `address`.
    pub fn nodes_at(&self, address: u8) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.state.read_dip() == address)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn node_at(&self, address: u8) -> Option<NodeId> {
        self.nodes_at(address).into_iter().next()
    }

    pub fn unplug(&mut self, id: NodeId) -> Result<(), BusError> {
        let ctl = self
            .nodes
            .get_mut(id)
            .ok_or(BusError::UnknownPort(PortId::MAX))?;
        if let Some(p) = ctl.port() {
            self.port_index.remove(&p);
        }
        ctl.unplug(&mut self.bus)
    }

    pub fn plug(&mut self, id: NodeId) -> Result<PortId, BusError> {
        let ctl = self
            .nodes
            .get_mut(id)
            .ok_or(BusError::UnknownPort(PortId::MAX))?;
        let p = ctl.plug(&mut self.bus)?;
        self.port_index.insert(p, id);
        Ok(p)
    }

    /// Port currently serving `id`, if plugged.
    pub fn port_of(&self, id: NodeId) -> Option<PortId> {
        self.nodes
            .get(id)
            .and_then(|n| n.port())
            .filter(|&p| self.bus.is_attached(p))
    }

    pub fn transmit_from_master(
        &mut self,
        bytes: &[u8],
    ) -> Result<crate::bus::TransmissionHandle, BusError> {
        let port = self
            .master_port()
            .ok_or(BusError::UnknownPort(PortId::MAX))?;
        self.bus.transmit(port, bytes)
    }

    pub fn reset_master_rx(&mut self) {
        self.master_rx.reset();
    }

    /// When the master port last received a byte.
    pub fn last_master_rx(&self) -> Option<Micros> {
        self.last_master_rx
    }

    /// Commands executed by nodes since the last drain.
    pub fn drain_journal(&mut self) -> Vec<Execution> {
        std::mem::take(&mut self.journal)
    }

    pub fn journal(&self) -> &[Execution] {
        &self.journal
    }

    /// Advances time with no interest in what the master receives.
    pub fn advance(&mut self, duration_us: Micros) -> Vec<BusEvent> {
        self.run(duration_us, |_, _| ControlFlow::Continue(()))
    }

    /// Advances up to `duration_us`, passing every frame candidate the master
    /// port assembles to `on_master`. Breaking stops the clock there.
    pub fn run<F>(&mut self, duration_us: Micros, mut on_master: F) -> Vec<BusEvent>
    where
        F: FnMut(Micros, Reception) -> ControlFlow<()>,
    {
        let Network {
            bus,
            master_port,
            nodes,
            port_index,
            master_rx,
            last_master_rx,
            journal,
        } = self;
        let master_port = *master_port;
        bus.advance_with(duration_us, |bus, d| {
            if Some(d.port_id) == master_port {
                *last_master_rx = Some(d.timestamp_us);
                master_rx.push(d.value);
                let mut flow = ControlFlow::Continue(());
                while let Some(r) = master_rx.poll() {
                    if on_master(d.timestamp_us, r).is_break() {
                        flow = ControlFlow::Break(());
                    }
                }
                return flow;
            }
            let Some(&id) = port_index.get(&d.port_id) else {
                return ControlFlow::Continue(());
            };
            let ctl = &mut nodes[id];
            if let Some(action) = ctl.state.on_byte(d.value) {
                journal.push(Execution {
                    at_us: d.timestamp_us,
                    node: id,
                    address: ctl.state.read_dip(),
                    frame: *action.frame(),
                });
                if let NodeAction::Reply(_, resp) = &action {
                    ctl.respond_after(bus, resp)
                        .expect("plugged node lost its port");
                }
            }
            ControlFlow::Continue(())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::EventKind;
    use crate::protocol::{encode_command, CommandCode};

    #[test]
    fn node_replies_two_byte_times_after_frame() {
        let mut net = Network::new(BusConfig::default(), &[NodeSpec::new(5)]).unwrap();
        let bt = net.byte_time_us();
        let frame = encode_command(&Frame::new(5, CommandCode::StatusQuery)).unwrap();
        net.transmit_from_master(&frame).unwrap();
        let mut got = None;
        let events = net.run(100_000, |_, r| {
            got = Some(r);
            ControlFlow::Break(())
        });
        let node_port = net.port_of(0).unwrap();
        let first_reply = events
            .iter()
            .find(|e| e.kind == EventKind::ByteSent && e.port_id == node_port)
            .unwrap();
        // Final command byte lands at 4 * bt; reply starts 2 * bt later.
        assert_eq!(first_reply.timestamp_us, 4 * bt + 2 * bt);
        assert_eq!(
            got,
            Some(Ok(ResponseFrame::new(5, CommandCode::StatusQuery, vec![0])))
        );
        assert_eq!(net.drain_journal().len(), 1);
    }

    #[test]
    fn broadcast_query_schedules_no_reply() {
        let specs: Vec<NodeSpec> = (1..=3).map(NodeSpec::new).collect();
        let mut net = Network::new(BusConfig::default(), &specs).unwrap();
        let frame = encode_command(&Frame::broadcast(CommandCode::StatusQuery)).unwrap();
        net.transmit_from_master(&frame).unwrap();
        let events = net.advance(100_000);
        let master = net.master_port().unwrap();
        assert!(events
            .iter()
            .filter(|e| e.kind == EventKind::ByteSent)
            .all(|e| e.port_id == master));
        assert_eq!(net.drain_journal().len(), 3);
    }

    #[test]
    fn duplicate_addresses_collide() {
        let mut net =
            Network::new(BusConfig::default(), &[NodeSpec::new(7), NodeSpec::new(7)]).unwrap();
        let frame = encode_command(&Frame::new(7, CommandCode::StatusQuery)).unwrap();
        net.transmit_from_master(&frame).unwrap();
        let events = net.advance(100_000);
        assert!(events.iter().any(|e| e.kind == EventKind::Collision));
    }
}
