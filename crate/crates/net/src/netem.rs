//! An impairing TCP proxy. Each direction reads whole wire messages, asks its
//! own [`Impairer`] for a delivery time and replays them through a delay
//! line, so a slow delivery never stalls the reading side.

use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use crate::clock::{sleep_until_ns, Clock};
use crate::impair::{Impairer, NetworkProfile};
use crate::wire::read_raw;

pub struct NetemProxy {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl NetemProxy {
    /// Listens on `listen`; every accepted connection is bridged to
    /// `upstream`. `up` impairs traffic toward the upstream, `down` the
    /// replies.
    pub fn start(listen: SocketAddr, upstream: SocketAddr, up: NetworkProfile, down: NetworkProfile, seed: u64) -> io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let streams = Arc::new(Mutex::new(Vec::new()));
        let accept = {
            let stop = stop.clone();
            let streams = streams.clone();
            thread::Builder::new().name("netem-accept".into()).spawn(move || {
                let mut n = 0u64;
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(a) = conn else { continue };
                    let b = match TcpStream::connect(upstream) {
                        Ok(b) => b,
                        Err(e) => {
                            log::warn!("netem: upstream {upstream} unreachable: {e}");
                            continue;
                        }
                    };
                    let _ = a.set_nodelay(true);
                    let _ = b.set_nodelay(true);
                    if let (Ok(a2), Ok(b2)) = (a.try_clone(), b.try_clone()) {
                        streams.lock().unwrap().extend([a2, b2]);
                    }
                    let seed_up = seed.wrapping_add(2 * n);
                    pump(a.try_clone().unwrap(), b.try_clone().unwrap(), Impairer::new(&up, seed_up));
                    pump(b, a, Impairer::new(&down, seed_up + 1));
                    n += 1;
                }
            })?
        };
        Ok(Self {
            addr,
            stop,
            streams,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        for s in self.streams.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for NetemProxy {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn pump(mut from: TcpStream, mut to: TcpStream, mut imp: Impairer) {
    let clock = Clock::system();
    let (tx, rx) = mpsc::channel::<(u64, Vec<u8>)>();
    thread::spawn(move || {
        loop {
            match read_raw(&mut from) {
                Ok(Some((_, bytes))) => {
                    let at = imp.schedule(clock.now_ns(), bytes.len());
                    if tx.send((at, bytes)).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    log::debug!("netem: read ended: {e}");
                    break;
                }
            }
        }
    });
    thread::spawn(move || {
        for (at, bytes) in rx {
            sleep_until_ns(&clock, at);
            if to.write_all(&bytes).is_err() {
                break;
            }
        }
        let _ = to.shutdown(Shutdown::Write);
    });
}
