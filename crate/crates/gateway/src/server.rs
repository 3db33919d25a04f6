//! Newline-delimited JSON over TCP. One request per line, one response
//! line back. Connections are served on their own threads; every request
//! goes through the single gateway behind a mutex.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex, PoisonError};
use std::thread;

use crate::api::{ErrorKind, Response};
use crate::gateway::Gateway;

pub struct Server {
    listener: TcpListener,
    gateway: Arc<Mutex<Gateway>>,
    max_request_bytes: usize,
}

impl Server {
    pub fn bind(gateway: Gateway, addr: &str) -> io::Result<Self> {
        let max_request_bytes = gateway.config().server.max_request_bytes;
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            gateway: Arc::new(Mutex::new(gateway)),
            max_request_bytes,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the listener fails.
    pub fn run(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = match stream {
                Ok(stream) => stream,
                Err(err) if err.kind() == io::ErrorKind::Interrupted => continue,
                Err(err) => return Err(err),
            };
            let gateway = Arc::clone(&self.gateway);
            let max = self.max_request_bytes;
            thread::spawn(move || {
                let _ = serve_connection(stream, &gateway, max);
            });
        }
        Ok(())
    }
}

fn serve_connection(stream: TcpStream, gateway: &Mutex<Gateway>, max: usize) -> io::Result<()> {
    // Rate limiting is per source address, not per connection.
    let client = stream
        .peer_addr()
        .map(|a| a.ip().to_string())
        .unwrap_or_else(|_| "unknown".into());
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = Vec::new();
    loop {
        line.clear();
        let read = reader
            .by_ref()
            .take(max as u64 + 1)
            .read_until(b'\n', &mut line)?;
        if read == 0 {
            return Ok(());
        }
        if line.last() != Some(&b'\n') && line.len() > max {
            let response = Response::failure(
                ErrorKind::BadRequest,
                format!("request exceeds {max} bytes"),
                None,
            );
            write_response(&mut writer, &response)?;
            return Ok(());
        }
        let text = String::from_utf8_lossy(&line);
        let body = text.trim();
        if body.is_empty() {
            continue;
        }
        let response = gateway
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .handle_json(&client, body);
        write_response(&mut writer, &response)?;
    }
}

fn write_response(writer: &mut TcpStream, response: &Response) -> io::Result<()> {
    let mut bytes = serde_json::to_vec(response).map_err(io::Error::other)?;
    bytes.push(b'\n');
    writer.write_all(&bytes)
}
