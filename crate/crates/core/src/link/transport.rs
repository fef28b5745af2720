use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::time::{Duration, Instant};

use super::{decode, encode, Body, LinkError, Message, ServerSession, UserEndpoint};
use crate::lattice::TimingWord;
use crate::protocol::{Click, SiftedBlock};
use crate::schedule::UserId;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

enum Sink {
    File(BufWriter<File>),
    Memory(Vec<String>),
}

/// Message log, one line per message: direction, microseconds since the
/// transcript was opened, then the wire line.
pub struct Transcript {
    sink: Sink,
    start: Instant,
}

impl Transcript {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            sink: Sink::File(BufWriter::new(File::create(path)?)),
            start: Instant::now(),
        })
    }

    pub fn memory() -> Self {
        Self {
            sink: Sink::Memory(Vec::new()),
            start: Instant::now(),
        }
    }

    /// `outbound` is from the point of view of the transcript's owner.
    pub fn record(&mut self, outbound: bool, line: &str) {
        let dir = if outbound { '>' } else { '<' };
        let entry = format!("{dir} {} {line}", self.start.elapsed().as_micros());
        match &mut self.sink {
            Sink::File(w) => {
                if let Err(e) = writeln!(w, "{entry}") {
                    log::warn!("transcript write failed: {e}");
                }
            }
            Sink::Memory(lines) => lines.push(entry),
        }
    }

    pub fn lines(&self) -> &[String] {
        match &self.sink {
            Sink::Memory(lines) => lines,
            Sink::File(_) => &[],
        }
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        match &mut self.sink {
            Sink::File(w) => w.flush(),
            Sink::Memory(_) => Ok(()),
        }
    }
}

/// Both ends' view of one sifted block. The user side is only known when
/// the user runs in this process.
#[derive(Debug, Clone, PartialEq)]
pub struct SiftPair {
    pub server: SiftedBlock,
    pub user: Option<SiftedBlock>,
}

/// Runs the per-block exchange with each user.
pub trait Sifter {
    fn open(&mut self, user: UserId) -> Result<(), LinkError>;
    fn sift_block(
        &mut self,
        user: UserId,
        block: u64,
        clicks: &[Click],
        server_bases: &[u8],
    ) -> Result<SiftPair, LinkError>;
    fn notify(&mut self, user: UserId, word: TimingWord) -> Result<(), LinkError>;
    fn close(&mut self) -> Result<(), LinkError>;
}

/// Delivers `first` from the server to the user and keeps relaying replies
/// until neither side has anything to say.
pub fn pump(
    server: &mut ServerSession,
    user: &mut UserEndpoint,
    first: Message,
    to_user: bool,
    mut transcript: Option<&mut Transcript>,
) -> Result<(Option<SiftedBlock>, Option<SiftedBlock>), LinkError> {
    let mut queue = VecDeque::from([(to_user, encode(&first))]);
    let (mut server_done, mut user_done) = (None, None);
    while let Some((to_user, line)) = queue.pop_front() {
        if let Some(t) = transcript.as_deref_mut() {
            t.record(!to_user, &line);
        }
        let msg = decode(&line)?;
        let step = if to_user { user.handle(&msg) } else { server.handle(&msg) };
        queue.extend(step.outbound.iter().map(|m| (!to_user, encode(m))));
        if to_user {
            user_done = step.completed.or(user_done);
        } else {
            server_done = step.completed.or(server_done);
        }
        if let Some(err) = step.error {
            return Err(err);
        }
    }
    Ok((server_done, user_done))
}

/// Server and users in one process, talking through the wire codec.
pub struct InProcSifter {
    seed: u64,
    sample_fraction: f64,
    sessions: BTreeMap<UserId, (ServerSession, UserEndpoint)>,
    transcript: Option<Transcript>,
}

impl InProcSifter {
    pub fn new(seed: u64, sample_fraction: f64, transcript: Option<Transcript>) -> Self {
        Self {
            seed,
            sample_fraction,
            sessions: BTreeMap::new(),
            transcript,
        }
    }

    pub fn transcript(&self) -> Option<&Transcript> {
        self.transcript.as_ref()
    }
}

impl Sifter for InProcSifter {
    fn open(&mut self, user: UserId) -> Result<(), LinkError> {
        if self.sessions.contains_key(&user) {
            return Ok(());
        }
        let mut server = ServerSession::new(user, self.seed, self.sample_fraction);
        let mut endpoint = UserEndpoint::new(user, self.seed);
        let hello = endpoint.hello()?;
        pump(&mut server, &mut endpoint, hello, false, self.transcript.as_mut())?;
        self.sessions.insert(user, (server, endpoint));
        Ok(())
    }

    fn sift_block(
        &mut self,
        user: UserId,
        block: u64,
        clicks: &[Click],
        server_bases: &[u8],
    ) -> Result<SiftPair, LinkError> {
        let (server, endpoint) = self
            .sessions
            .get_mut(&user)
            .ok_or_else(|| LinkError::ProtocolViolation(format!("no session for user {user}")))?;
        let announce = server.announce(block, clicks, server_bases)?;
        let (s, u) = pump(server, endpoint, announce, true, self.transcript.as_mut())?;
        let server = s.ok_or_else(|| LinkError::ProtocolViolation("exchange ended early".into()))?;
        Ok(SiftPair { server, user: u })
    }

    fn notify(&mut self, user: UserId, word: TimingWord) -> Result<(), LinkError> {
        if let Some((server, endpoint)) = self.sessions.get_mut(&user) {
            let notice = server.notice(word)?;
            pump(server, endpoint, notice, true, self.transcript.as_mut())?;
        }
        Ok(())
    }

    fn close(&mut self) -> Result<(), LinkError> {
        for (server, endpoint) in self.sessions.values_mut() {
            if !server.is_closed() {
                let bye = server.bye();
                pump(server, endpoint, bye, true, self.transcript.as_mut())?;
            }
        }
        if let Some(t) = self.transcript.as_mut() {
            t.flush()?;
        }
        Ok(())
    }
}

/// A newline-delimited JSON connection.
pub struct LineConn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl LineConn {
    pub fn new(stream: TcpStream) -> Result<Self, LinkError> {
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    pub fn peer(&self) -> Option<SocketAddr> {
        self.writer.peer_addr().ok()
    }

    pub fn send(&mut self, msg: &Message, transcript: Option<&mut Transcript>) -> Result<(), LinkError> {
        let line = encode(msg);
        if let Some(t) = transcript {
            t.record(true, &line);
        }
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    /// Next line, decoded. `None` waits indefinitely.
    pub fn recv(&mut self, timeout: Option<Duration>, transcript: Option<&mut Transcript>) -> Result<Message, LinkError> {
        self.reader.get_ref().set_read_timeout(timeout)?;
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(LinkError::Closed);
        }
        let line = line.trim_end_matches(['\n', '\r']);
        if let Some(t) = transcript {
            t.record(false, line);
        }
        decode(line)
    }
}

/// Server side of socket mode: one connection per user process.
pub struct NetSifter {
    conns: BTreeMap<UserId, (ServerSession, LineConn)>,
    timeout: Duration,
    transcript: Option<Transcript>,
}

impl NetSifter {
    /// Accepts `n_users` connections and completes their handshakes.
    pub fn accept(
        listener: &TcpListener,
        n_users: usize,
        seed: u64,
        sample_fraction: f64,
        timeout: Duration,
        mut transcript: Option<Transcript>,
        accept_deadline: Duration,
    ) -> Result<Self, LinkError> {
        listener.set_nonblocking(true)?;
        let deadline = Instant::now() + accept_deadline;
        let mut conns = BTreeMap::new();
        while conns.len() < n_users {
            let stream = match listener.accept() {
                Ok((stream, _)) => stream,
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        return Err(LinkError::Timeout);
                    }
                    std::thread::sleep(Duration::from_millis(5));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            stream.set_nonblocking(false)?;
            let mut conn = LineConn::new(stream)?;
            let hello = conn.recv(Some(timeout), transcript.as_mut())?;
            let Body::Hello(h) = &hello.body else {
                let err = LinkError::ProtocolViolation(format!("{} before HELLO", hello.body.type_name()));
                conn.send(&Message::error(hello.session, hello.block, &err), transcript.as_mut())?;
                return Err(err);
            };
            if conns.contains_key(&h.user) {
                return Err(LinkError::ProtocolViolation(format!("user {} connected twice", h.user)));
            }
            let mut session = ServerSession::new(h.user, seed, sample_fraction);
            let step = session.handle(&hello);
            for m in &step.outbound {
                conn.send(m, transcript.as_mut())?;
            }
            if let Some(err) = step.error {
                return Err(err);
            }
            log::info!("user {} connected from {:?}", h.user, conn.peer());
            conns.insert(h.user, (session, conn));
        }
        Ok(Self {
            conns,
            timeout,
            transcript,
        })
    }

    pub fn users(&self) -> Vec<UserId> {
        self.conns.keys().copied().collect()
    }
}

impl Sifter for NetSifter {
    fn open(&mut self, user: UserId) -> Result<(), LinkError> {
        if self.conns.contains_key(&user) {
            Ok(())
        } else {
            Err(LinkError::ProtocolViolation(format!("user {user} is not connected")))
        }
    }

    fn sift_block(
        &mut self,
        user: UserId,
        block: u64,
        clicks: &[Click],
        server_bases: &[u8],
    ) -> Result<SiftPair, LinkError> {
        let (session, conn) = self
            .conns
            .get_mut(&user)
            .ok_or_else(|| LinkError::ProtocolViolation(format!("user {user} is not connected")))?;
        let announce = session.announce(block, clicks, server_bases)?;
        let result = (|| {
            conn.send(&announce, self.transcript.as_mut())?;
            loop {
                let msg = match conn.recv(Some(self.timeout), self.transcript.as_mut()) {
                    Ok(msg) => msg,
                    Err(err @ LinkError::UnknownType(_)) => {
                        conn.send(&Message::error(session.session_id(), block, &err), self.transcript.as_mut())?;
                        continue;
                    }
                    Err(err) => return Err(err),
                };
                let step = session.handle(&msg);
                for m in &step.outbound {
                    conn.send(m, self.transcript.as_mut())?;
                }
                if let Some(err) = step.error {
                    return Err(err);
                }
                if let Some(server) = step.completed {
                    return Ok(SiftPair { server, user: None });
                }
                if step.closed {
                    return Err(LinkError::Closed);
                }
            }
        })();
        if matches!(result, Err(LinkError::Closed) | Err(LinkError::Timeout)) {
            self.conns.remove(&user);
        }
        result
    }

    fn notify(&mut self, user: UserId, word: TimingWord) -> Result<(), LinkError> {
        if let Some((session, conn)) = self.conns.get_mut(&user) {
            let notice = session.notice(word)?;
            conn.send(&notice, self.transcript.as_mut())?;
        }
        Ok(())
    }

    fn close(&mut self) -> Result<(), LinkError> {
        for (session, conn) in self.conns.values_mut() {
            if !session.is_closed() {
                let bye = session.bye();
                conn.send(&bye, self.transcript.as_mut())?;
            }
        }
        if let Some(t) = self.transcript.as_mut() {
            t.flush()?;
        }
        Ok(())
    }
}

pub fn connect_with_retry<A: ToSocketAddrs>(addr: A, patience: Duration) -> Result<TcpStream, LinkError> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    let deadline = Instant::now() + patience;
    loop {
        for a in &addrs {
            if let Ok(s) = TcpStream::connect(a) {
                return Ok(s);
            }
        }
        if Instant::now() > deadline {
            return Err(LinkError::Timeout);
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

/// What a user process learned over its session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserRun {
    pub blocks: Vec<SiftedBlock>,
    pub last_notice: Option<TimingWord>,
}

/// User side of socket mode: greet, then answer the server until BYE.
pub fn run_user(
    stream: TcpStream,
    user: UserId,
    seed: u64,
    timeout: Duration,
    mut transcript: Option<&mut Transcript>,
) -> Result<UserRun, LinkError> {
    let mut conn = LineConn::new(stream)?;
    let mut endpoint = UserEndpoint::new(user, seed);
    let mut run = UserRun::default();
    conn.send(&endpoint.hello()?, transcript.as_deref_mut())?;
    loop {
        let wait = if endpoint.is_idle() { None } else { Some(timeout) };
        let msg = match conn.recv(wait, transcript.as_deref_mut()) {
            Ok(msg) => msg,
            Err(err @ LinkError::UnknownType(_)) => {
                conn.send(&Message::error(endpoint.session_id(), 0, &err), transcript.as_deref_mut())?;
                continue;
            }
            Err(err) => return Err(err),
        };
        let step = endpoint.handle(&msg);
        for m in &step.outbound {
            conn.send(m, transcript.as_deref_mut())?;
        }
        if let Some(err) = step.error {
            return Err(err);
        }
        if let Some(done) = step.completed {
            run.blocks.push(done);
        }
        if step.closed {
            run.last_notice = endpoint.last_notice;
            if let Some(t) = transcript {
                t.flush()?;
            }
            return Ok(run);
        }
    }
}
