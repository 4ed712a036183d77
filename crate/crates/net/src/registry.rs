//! Device and client bookkeeping for the relay. Pure state; callers pass the
//! current time and hold whatever lock makes it linearizable.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::wire::{error_code, DeviceInfo, DeviceStatus};

pub const DEFAULT_STALE_NS: u64 = 10_000_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("device id {0} is already registered")]
    DuplicateId(u32),
    #[error("unknown device {0}")]
    UnknownDevice(u32),
    #[error("client {client} is not attached to device {device}")]
    NotAttached { client: u32, device: u32 },
    #[error("client {client} is view-only on device {device}")]
    NoAuthority { client: u32, device: u32 },
}

impl RegistryError {
    pub fn wire_code(&self) -> u8 {
        match self {
            RegistryError::DuplicateId(_) => error_code::DUPLICATE_ID,
            RegistryError::UnknownDevice(_) => error_code::UNKNOWN_DEVICE,
            RegistryError::NotAttached { .. } => error_code::NOT_ATTACHED,
            RegistryError::NoAuthority { .. } => error_code::NO_AUTHORITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceEntry {
    pub device_id: u32,
    pub name: String,
    /// Connection currently serving the device, if any.
    pub conn: Option<u64>,
    pub last_seen_ns: u64,
    /// Clients attached to this device, oldest first. The last one holds
    /// control.
    pub attached: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientEntry {
    pub client_id: u32,
    pub conn: u64,
    pub attached: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct Registry {
    stale_after_ns: u64,
    devices: BTreeMap<u32, DeviceEntry>,
    clients: BTreeMap<u32, ClientEntry>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::new(DEFAULT_STALE_NS)
    }
}

impl Registry {
    pub fn new(stale_after_ns: u64) -> Self {
        Self {
            stale_after_ns,
            devices: BTreeMap::new(),
            clients: BTreeMap::new(),
        }
    }

    /// Registers (or re-registers after a disconnect) a device. A device id
    /// held by a live connection is rejected.
    pub fn register_device(&mut self, device_id: u32, name: &str, conn: u64, now_ns: u64) -> Result<(), RegistryError> {
        match self.devices.get_mut(&device_id) {
            Some(e) if e.conn.is_some() => Err(RegistryError::DuplicateId(device_id)),
            Some(e) => {
                e.conn = Some(conn);
                e.name = name.to_string();
                e.last_seen_ns = now_ns;
                Ok(())
            }
            None => {
                self.devices.insert(
                    device_id,
                    DeviceEntry {
                        device_id,
                        name: name.to_string(),
                        conn: Some(conn),
                        last_seen_ns: now_ns,
                        attached: Vec::new(),
                    },
                );
                Ok(())
            }
        }
    }

    pub fn touch(&mut self, device_id: u32, now_ns: u64) {
        if let Some(e) = self.devices.get_mut(&device_id) {
            e.last_seen_ns = e.last_seen_ns.max(now_ns);
        }
    }

    /// Marks the device's connection gone; attachments are kept so clients
    /// resume when it reconnects.
    pub fn disconnect_device(&mut self, device_id: u32, conn: u64) {
        if let Some(e) = self.devices.get_mut(&device_id) {
            if e.conn == Some(conn) {
                e.conn = None;
            }
        }
    }

    pub fn device(&self, device_id: u32) -> Option<&DeviceEntry> {
        self.devices.get(&device_id)
    }

    pub fn status(&self, e: &DeviceEntry, now_ns: u64) -> DeviceStatus {
        if e.conn.is_some() && now_ns.saturating_sub(e.last_seen_ns) < self.stale_after_ns {
            DeviceStatus::Online
        } else {
            DeviceStatus::Offline
        }
    }

    pub fn list(&self, now_ns: u64) -> Vec<DeviceInfo> {
        self.devices
            .values()
            .map(|e| DeviceInfo {
                device_id: e.device_id,
                status: self.status(e, now_ns),
                last_seen_ns: e.last_seen_ns,
                name: e.name.clone(),
            })
            .collect()
    }

    pub fn register_client(&mut self, client_id: u32, conn: u64) {
        self.clients.insert(
            client_id,
            ClientEntry {
                client_id,
                conn,
                attached: None,
            },
        );
    }

    pub fn client(&self, client_id: u32) -> Option<&ClientEntry> {
        self.clients.get(&client_id)
    }

    fn detach(&mut self, client_id: u32) -> Option<u32> {
        let prev = self.clients.get_mut(&client_id)?.attached.take()?;
        if let Some(d) = self.devices.get_mut(&prev) {
            d.attached.retain(|c| *c != client_id);
        }
        Some(prev)
    }

    /// Attaches a client to a device, detaching it from any previous one,
    /// and hands it control. Returns the previous device.
    pub fn attach(&mut self, client_id: u32, device_id: u32) -> Result<Option<u32>, RegistryError> {
        if !self.devices.contains_key(&device_id) {
            return Err(RegistryError::UnknownDevice(device_id));
        }
        let prev = self.detach(client_id);
        if let Some(c) = self.clients.get_mut(&client_id) {
            c.attached = Some(device_id);
            self.devices.get_mut(&device_id).unwrap().attached.push(client_id);
        }
        Ok(prev)
    }

    pub fn remove_client(&mut self, client_id: u32) {
        self.detach(client_id);
        self.clients.remove(&client_id);
    }

    pub fn subscribers(&self, device_id: u32) -> &[u32] {
        self.devices.get(&device_id).map(|d| d.attached.as_slice()).unwrap_or(&[])
    }

    pub fn controller(&self, device_id: u32) -> Option<u32> {
        self.devices.get(&device_id)?.attached.last().copied()
    }

    pub fn check_control(&self, client_id: u32, device_id: u32) -> Result<(), RegistryError> {
        let attached = self.clients.get(&client_id).and_then(|c| c.attached);
        if attached != Some(device_id) {
            return Err(RegistryError::NotAttached {
                client: client_id,
                device: device_id,
            });
        }
        if self.controller(device_id) != Some(client_id) {
            return Err(RegistryError::NoAuthority {
                client: client_id,
                device: device_id,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: u64 = 1_000_000_000;

    #[test]
    fn two_devices_listed() {
        let mut r = Registry::default();
        r.register_device(1, "a", 10, 0).unwrap();
        r.register_device(2, "b", 11, 0).unwrap();
        let l = r.list(S);
        assert_eq!(l.len(), 2);
        assert!(l.iter().all(|d| d.status == DeviceStatus::Online));
    }

    #[test]
    fn silent_device_goes_offline() {
        let mut r = Registry::default();
        r.register_device(1, "a", 10, 0).unwrap();
        r.touch(1, 2 * S);
        assert_eq!(r.list(11 * S)[0].status, DeviceStatus::Online);
        assert_eq!(r.list(12 * S)[0].status, DeviceStatus::Offline);
    }

    #[test]
    fn duplicate_rejected_until_disconnect() {
        let mut r = Registry::default();
        r.register_device(1, "a", 10, 0).unwrap();
        let e = r.register_device(1, "a2", 11, 0).unwrap_err();
        assert_eq!(e.wire_code(), error_code::DUPLICATE_ID);
        r.disconnect_device(1, 10);
        assert_eq!(r.list(S)[0].status, DeviceStatus::Offline);
        r.register_device(1, "a2", 11, S).unwrap();
        assert_eq!(r.list(S)[0].status, DeviceStatus::Online);
    }

    #[test]
    fn latest_attacher_controls() {
        let mut r = Registry::default();
        r.register_device(1, "a", 10, 0).unwrap();
        r.register_device(2, "b", 11, 0).unwrap();
        r.register_client(100, 20);
        r.register_client(101, 21);
        assert_eq!(r.attach(100, 9), Err(RegistryError::UnknownDevice(9)));
        r.attach(100, 1).unwrap();
        r.check_control(100, 1).unwrap();
        r.attach(101, 1).unwrap();
        assert!(matches!(r.check_control(100, 1), Err(RegistryError::NoAuthority { .. })));
        r.check_control(101, 1).unwrap();
        assert!(matches!(r.check_control(101, 2), Err(RegistryError::NotAttached { .. })));
        assert_eq!(r.subscribers(1), &[100, 101]);
        // Switching away hands control back to the remaining attacher.
        assert_eq!(r.attach(101, 2).unwrap(), Some(1));
        r.check_control(100, 1).unwrap();
        r.remove_client(100);
        assert!(r.subscribers(1).is_empty());
    }
}
