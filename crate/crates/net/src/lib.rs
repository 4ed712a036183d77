//! Networking half of the teleoperation stack: wire protocol, network
//! emulation, the relay, a simulated device, a client and the latency
//! harness.

pub mod client;
pub mod clock;
pub mod device;
pub mod harness;
pub mod impair;
pub mod netem;
pub mod outbox;
pub mod record;
pub mod registry;
pub mod relay;
pub mod stage;
pub mod wire;

pub use clock::Clock;
pub use impair::{Impairer, NetworkProfile};
pub use relay::{Relay, RelayConfig};
pub use wire::{decode_message, encode_message, Message, WireError, WireMessage};
