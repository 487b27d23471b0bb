use std::io::{BufReader, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::wire::{decode, decode_body, encode, read_body, write_message, Message};
use super::CollectError;

/// A reliable, ordered message pipe. Every implementation moves encoded
/// frames, so the codec is exercised on every hop.
pub trait Transport: Send {
    fn send(&mut self, msg: &Message) -> Result<(), CollectError>;
    fn recv(&mut self) -> Result<Message, CollectError>;
}

/// In-process transport over a pair of channels.
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

impl ChannelTransport {
    pub fn pair(timeout: Duration) -> (ChannelTransport, ChannelTransport) {
        let (tx_a, rx_b) = channel();
        let (tx_b, rx_a) = channel();
        (ChannelTransport { tx: tx_a, rx: rx_a, timeout }, ChannelTransport { tx: tx_b, rx: rx_b, timeout })
    }
}

impl Transport for ChannelTransport {
    fn send(&mut self, msg: &Message) -> Result<(), CollectError> {
        self.tx.send(encode(msg)).map_err(|_| CollectError::Closed)
    }

    fn recv(&mut self) -> Result<Message, CollectError> {
        let frame = self.rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => CollectError::Timeout,
            RecvTimeoutError::Disconnected => CollectError::Closed,
        })?;
        let (msg, used) = decode(&frame)?;
        if used != frame.len() {
            return Err(CollectError::Codec("extra bytes after frame".into()));
        }
        Ok(msg)
    }
}

pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream, timeout: Duration) -> Result<TcpTransport, CollectError> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        let writer = stream.try_clone()?;
        Ok(TcpTransport { reader: BufReader::new(stream), writer })
    }

    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<TcpTransport, CollectError> {
        TcpTransport::new(TcpStream::connect_timeout(&addr, timeout)?, timeout)
    }

    /// A connected loopback pair through `listener`: `(dialing side, accepted side)`.
    /// The caller must make sure no other client dials the listener meanwhile.
    pub fn loopback_pair(listener: &TcpListener, timeout: Duration) -> Result<(TcpTransport, TcpTransport), CollectError> {
        let addr = listener.local_addr()?;
        let client = TcpStream::connect_timeout(&addr, timeout)?;
        let (server, _) = listener.accept()?;
        Ok((TcpTransport::new(client, timeout)?, TcpTransport::new(server, timeout)?))
    }
}

fn io_to_collect(e: std::io::Error) -> CollectError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => CollectError::Timeout,
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::BrokenPipe | ErrorKind::ConnectionAborted => {
            CollectError::Closed
        }
        ErrorKind::InvalidData => CollectError::Codec(e.to_string()),
        _ => CollectError::Io(e),
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: &Message) -> Result<(), CollectError> {
        write_message(&mut self.writer, msg).map_err(io_to_collect)
    }

    fn recv(&mut self) -> Result<Message, CollectError> {
        let body = read_body(&mut self.reader).map_err(io_to_collect)?;
        decode_body(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::wire::Verdict;

    #[test]
    fn channel_delivers_in_order_and_times_out() {
        let (mut a, mut b) = ChannelTransport::pair(Duration::from_millis(50));
        a.send(&Message::Ack).unwrap();
        a.send(&Message::Verdict(Verdict::Accept)).unwrap();
        assert_eq!(b.recv().unwrap(), Message::Ack);
        assert_eq!(b.recv().unwrap(), Message::Verdict(Verdict::Accept));
        assert!(matches!(b.recv(), Err(CollectError::Timeout)));
        drop(a);
        assert!(matches!(b.recv(), Err(CollectError::Closed)));
    }

    #[test]
    fn tcp_loopback() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let (mut a, mut b) = TcpTransport::loopback_pair(&listener, Duration::from_millis(200)).unwrap();
        let msg = Message::Data { rows: 2, dim: 2, values: vec![1, -2, 3, i64::MIN] };
        a.send(&msg).unwrap();
        assert_eq!(b.recv().unwrap(), msg);
        assert!(matches!(b.recv(), Err(CollectError::Timeout)));
        drop(a);
        assert!(matches!(b.recv(), Err(CollectError::Closed)));
    }
}
