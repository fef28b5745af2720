//! Pure state machines for both ends of a session. They consume decoded
//! messages and return what to send; transports move the bytes.

use super::{
    BasisReveal, Bitmap, BlockAnnounce, Body, CompensateNotice, Hello, HelloAck, LinkError, Message, QberResult,
    QberSample, SiftIndices,
};
use crate::lattice::TimingWord;
use crate::protocol::{choose_sample, click_bit, strip_sample, user_records, Click, SiftedBlock, UserRecord};
use crate::rng::{stream, Role};
use crate::schedule::UserId;

/// Result of feeding one message to a state machine.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Step {
    pub outbound: Vec<Message>,
    pub completed: Option<SiftedBlock>,
    pub error: Option<LinkError>,
    pub closed: bool,
}

fn sifted_block(user: UserId, block: u64, bits: &[u8], sample: &[usize], errors: u64) -> SiftedBlock {
    let sampled = sample.len() as u64;
    SiftedBlock {
        user_id: user,
        block_id: block,
        bits: strip_sample(bits, sample),
        sifted_count: bits.len() as u64,
        sampled,
        sample_errors: errors,
        qber_estimate: (sampled > 0).then(|| errors as f64 / sampled as f64),
        duration_s: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ServerState {
    AwaitHello,
    Ready,
    Announced {
        block: u64,
        announced: Vec<u32>,
        clicks: Vec<Click>,
        server_bases: Vec<u8>,
    },
    Sifted {
        block: u64,
        server_bits: Vec<u8>,
        sample: Vec<usize>,
    },
    Closed,
}

impl ServerState {
    fn name(&self) -> &'static str {
        match self {
            ServerState::AwaitHello => "await_hello",
            ServerState::Ready => "ready",
            ServerState::Announced { .. } => "announced",
            ServerState::Sifted { .. } => "sifted",
            ServerState::Closed => "closed",
        }
    }
}

/// Server end of one user's session.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerSession {
    user: UserId,
    seed: u64,
    sample_fraction: f64,
    state: ServerState,
    last_block: Option<u64>,
}

impl ServerSession {
    pub fn new(user: UserId, seed: u64, sample_fraction: f64) -> Self {
        Self {
            user,
            seed,
            sample_fraction,
            state: ServerState::AwaitHello,
            last_block: None,
        }
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn session_id(&self) -> u64 {
        u64::from(self.user)
    }

    pub fn is_ready(&self) -> bool {
        self.state == ServerState::Ready
    }

    pub fn is_closed(&self) -> bool {
        self.state == ServerState::Closed
    }

    pub fn state_name(&self) -> &'static str {
        self.state.name()
    }

    /// Opens the exchange for `block` with the server's raw clicks and bases.
    pub fn announce(&mut self, block: u64, clicks: &[Click], server_bases: &[u8]) -> Result<Message, LinkError> {
        if self.state != ServerState::Ready {
            return Err(LinkError::ProtocolViolation(format!(
                "cannot announce in state {}",
                self.state.name()
            )));
        }
        if self.last_block.is_some_and(|last| block <= last) {
            return Err(LinkError::OutOfOrder {
                got: block,
                last: self.last_block,
            });
        }
        if clicks.len() != server_bases.len() {
            return Err(LinkError::ProtocolViolation("clicks and bases differ in length".into()));
        }
        let single: Vec<bool> = clicks.iter().map(|c| click_bit(*c).is_some()).collect();
        let announced = (0..clicks.len() as u32).filter(|&i| single[i as usize]).collect();
        self.state = ServerState::Announced {
            block,
            announced,
            clicks: clicks.to_vec(),
            server_bases: server_bases.to_vec(),
        };
        Ok(Message::new(
            self.session_id(),
            block,
            Body::BlockAnnounce(BlockAnnounce {
                n: clicks.len(),
                clicks: Bitmap::from_bits(single),
            }),
        ))
    }

    pub fn notice(&self, word: TimingWord) -> Result<Message, LinkError> {
        if self.state != ServerState::Ready {
            return Err(LinkError::ProtocolViolation(format!(
                "cannot send a notice in state {}",
                self.state.name()
            )));
        }
        Ok(Message::new(
            self.session_id(),
            self.last_block.unwrap_or(0),
            Body::CompensateNotice(CompensateNotice {
                coarse: word.coarse,
                fine: word.fine,
            }),
        ))
    }

    pub fn bye(&mut self) -> Message {
        self.state = ServerState::Closed;
        Message::new(self.session_id(), self.last_block.unwrap_or(0), Body::Bye)
    }

    pub fn handle(&mut self, msg: &Message) -> Step {
        match self.transition(msg) {
            Ok(step) => step,
            Err(err) => {
                let reply = Message::error(self.session_id(), msg.block, &err);
                self.state = ServerState::AwaitHello;
                Step {
                    outbound: if matches!(err, LinkError::Peer { .. }) { Vec::new() } else { vec![reply] },
                    error: Some(err),
                    ..Step::default()
                }
            }
        }
    }

    fn transition(&mut self, msg: &Message) -> Result<Step, LinkError> {
        let mut step = Step::default();
        if let Body::Error(e) = &msg.body {
            return Err(LinkError::Peer {
                code: e.code.clone(),
                message: e.message.clone(),
            });
        }
        if msg.session != self.session_id() {
            return Err(LinkError::ProtocolViolation(format!(
                "session {} on the channel of session {}",
                msg.session,
                self.session_id()
            )));
        }
        if let Body::Bye = msg.body {
            if self.state == ServerState::Closed {
                return Err(LinkError::Closed);
            }
            self.state = ServerState::Closed;
            step.closed = true;
            return Ok(step);
        }
        let state = std::mem::replace(&mut self.state, ServerState::AwaitHello);
        match (state, &msg.body) {
            (ServerState::AwaitHello, Body::Hello(Hello { user })) if *user == self.user => {
                step.outbound.push(Message::new(
                    self.session_id(),
                    msg.block,
                    Body::HelloAck(HelloAck { user: self.user }),
                ));
                self.state = ServerState::Ready;
            }
            (
                ServerState::Announced {
                    block,
                    announced,
                    clicks,
                    server_bases,
                },
                Body::BasisReveal(BasisReveal { bases }),
            ) => {
                if msg.block != block {
                    return Err(LinkError::OutOfOrder {
                        got: msg.block,
                        last: self.last_block,
                    });
                }
                let bases = bases.u8s()?;
                if bases.len() != announced.len() {
                    return Err(LinkError::ProtocolViolation(format!(
                        "{} bases for {} announced pulses",
                        bases.len(),
                        announced.len()
                    )));
                }
                let mut kept = Vec::new();
                let mut server_bits = Vec::new();
                for (&pos, &ub) in announced.iter().zip(&bases) {
                    if server_bases[pos as usize] == ub {
                        kept.push(pos);
                        server_bits.push(click_bit(clicks[pos as usize]).expect("announced pulses clicked once"));
                    }
                }
                let mut rng = stream(self.seed, Role::QberSample, self.user, block);
                let sample = choose_sample(kept.len(), self.sample_fraction, &mut rng);
                let revealed = announced.iter().map(|&p| server_bases[p as usize]).collect::<Vec<_>>();
                step.outbound.push(Message::new(
                    self.session_id(),
                    block,
                    Body::SiftIndices(SiftIndices {
                        kept,
                        server_bases: Bitmap::from_u8s(&revealed),
                        sample: sample.iter().map(|&s| s as u32).collect(),
                    }),
                ));
                self.state = ServerState::Sifted {
                    block,
                    server_bits,
                    sample,
                };
            }
            (
                ServerState::Sifted {
                    block,
                    server_bits,
                    sample,
                },
                Body::QberSample(QberSample { bits }),
            ) => {
                if msg.block != block {
                    return Err(LinkError::OutOfOrder {
                        got: msg.block,
                        last: self.last_block,
                    });
                }
                let disclosed = bits.u8s()?;
                if disclosed.len() != sample.len() {
                    return Err(LinkError::ProtocolViolation(format!(
                        "{} sample bits for {} positions",
                        disclosed.len(),
                        sample.len()
                    )));
                }
                let errors = sample.iter().zip(&disclosed).filter(|(&p, &b)| server_bits[p] != b).count() as u64;
                step.outbound.push(Message::new(
                    self.session_id(),
                    block,
                    Body::QberResult(QberResult {
                        sampled: sample.len() as u64,
                        errors,
                    }),
                ));
                step.completed = Some(sifted_block(self.user, block, &server_bits, &sample, errors));
                self.last_block = Some(block);
                self.state = ServerState::Ready;
            }
            (ServerState::Announced { block, .. } | ServerState::Sifted { block, .. }, _) if msg.block != block => {
                return Err(LinkError::OutOfOrder {
                    got: msg.block,
                    last: self.last_block,
                });
            }
            (state, body) => {
                let name = state.name();
                self.state = state;
                return Err(LinkError::ProtocolViolation(format!(
                    "{} in state {name}",
                    body.type_name()
                )));
            }
        }
        Ok(step)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum UserState {
    Start,
    AwaitAck,
    Ready,
    Revealed {
        block: u64,
        records: Vec<UserRecord>,
        announced: Vec<u32>,
    },
    Sampled {
        block: u64,
        bits: Vec<u8>,
        sample: Vec<usize>,
    },
    Closed,
}

impl UserState {
    fn name(&self) -> &'static str {
        match self {
            UserState::Start => "start",
            UserState::AwaitAck => "await_ack",
            UserState::Ready => "ready",
            UserState::Revealed { .. } => "revealed",
            UserState::Sampled { .. } => "sampled",
            UserState::Closed => "closed",
        }
    }
}

/// User end of a session. Its pulses are regenerated from the shared seed,
/// standing in for the quantum channel.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEndpoint {
    user: UserId,
    seed: u64,
    state: UserState,
    last_block: Option<u64>,
    pub last_notice: Option<TimingWord>,
}

impl UserEndpoint {
    pub fn new(user: UserId, seed: u64) -> Self {
        Self {
            user,
            seed,
            state: UserState::Start,
            last_block: None,
            last_notice: None,
        }
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn session_id(&self) -> u64 {
        u64::from(self.user)
    }

    pub fn is_ready(&self) -> bool {
        self.state == UserState::Ready
    }

    pub fn is_closed(&self) -> bool {
        self.state == UserState::Closed
    }

    /// Waiting for the next block rather than inside an exchange.
    pub fn is_idle(&self) -> bool {
        matches!(self.state, UserState::Ready | UserState::Closed)
    }

    pub fn hello(&mut self) -> Result<Message, LinkError> {
        if self.state != UserState::Start {
            return Err(LinkError::ProtocolViolation(format!(
                "cannot greet in state {}",
                self.state.name()
            )));
        }
        self.state = UserState::AwaitAck;
        Ok(Message::new(self.session_id(), 0, Body::Hello(Hello { user: self.user })))
    }

    pub fn handle(&mut self, msg: &Message) -> Step {
        match self.transition(msg) {
            Ok(step) => step,
            Err(err) => {
                let reply = Message::error(self.session_id(), msg.block, &err);
                self.state = UserState::Start;
                Step {
                    outbound: if matches!(err, LinkError::Peer { .. }) { Vec::new() } else { vec![reply] },
                    error: Some(err),
                    ..Step::default()
                }
            }
        }
    }

    fn transition(&mut self, msg: &Message) -> Result<Step, LinkError> {
        let mut step = Step::default();
        if let Body::Error(e) = &msg.body {
            return Err(LinkError::Peer {
                code: e.code.clone(),
                message: e.message.clone(),
            });
        }
        if msg.session != self.session_id() {
            return Err(LinkError::ProtocolViolation(format!(
                "session {} on the channel of session {}",
                msg.session,
                self.session_id()
            )));
        }
        if let Body::Bye = msg.body {
            if self.state == UserState::Closed {
                return Err(LinkError::Closed);
            }
            self.state = UserState::Closed;
            step.closed = true;
            return Ok(step);
        }
        let state = std::mem::replace(&mut self.state, UserState::Start);
        match (state, &msg.body) {
            (UserState::AwaitAck, Body::HelloAck(HelloAck { user })) if *user == self.user => {
                self.state = UserState::Ready;
            }
            (UserState::Ready, Body::CompensateNotice(n)) => {
                self.last_notice = Some(TimingWord::new(n.coarse, n.fine));
                self.state = UserState::Ready;
            }
            (UserState::Ready, Body::BlockAnnounce(BlockAnnounce { n, clicks })) => {
                if self.last_block.is_some_and(|last| msg.block <= last) {
                    return Err(LinkError::OutOfOrder {
                        got: msg.block,
                        last: self.last_block,
                    });
                }
                let clicks = clicks.bits()?;
                if clicks.len() != *n {
                    return Err(LinkError::ProtocolViolation(format!(
                        "bitmap of {} bits for {n} pulses",
                        clicks.len()
                    )));
                }
                let records = user_records(self.seed, self.user, msg.block, *n);
                let announced: Vec<u32> = (0..*n as u32).filter(|&i| clicks[i as usize]).collect();
                let bases: Vec<u8> = announced.iter().map(|&p| records[p as usize].basis).collect();
                step.outbound.push(Message::new(
                    self.session_id(),
                    msg.block,
                    Body::BasisReveal(BasisReveal {
                        bases: Bitmap::from_u8s(&bases),
                    }),
                ));
                self.state = UserState::Revealed {
                    block: msg.block,
                    records,
                    announced,
                };
            }
            (
                UserState::Revealed {
                    block,
                    records,
                    announced,
                },
                Body::SiftIndices(SiftIndices {
                    kept,
                    server_bases,
                    sample,
                }),
            ) => {
                if msg.block != block {
                    return Err(LinkError::OutOfOrder {
                        got: msg.block,
                        last: self.last_block,
                    });
                }
                let server_bases = server_bases.u8s()?;
                if server_bases.len() != announced.len() {
                    return Err(LinkError::ProtocolViolation("server bases do not cover the announcement".into()));
                }
                let expected: Vec<u32> = announced
                    .iter()
                    .zip(&server_bases)
                    .filter(|(&p, &sb)| records[p as usize].basis == sb)
                    .map(|(&p, _)| p)
                    .collect();
                if &expected != kept {
                    return Err(LinkError::ProtocolViolation("kept indices disagree with the revealed bases".into()));
                }
                let bits: Vec<u8> = kept.iter().map(|&p| records[p as usize].bit).collect();
                let sample: Vec<usize> = sample.iter().map(|&s| s as usize).collect();
                if sample.windows(2).any(|w| w[0] >= w[1]) || sample.last().is_some_and(|&s| s >= bits.len()) {
                    return Err(LinkError::ProtocolViolation("sample positions must be sorted and in range".into()));
                }
                let disclosed: Vec<u8> = sample.iter().map(|&s| bits[s]).collect();
                step.outbound.push(Message::new(
                    self.session_id(),
                    block,
                    Body::QberSample(QberSample {
                        bits: Bitmap::from_u8s(&disclosed),
                    }),
                ));
                self.state = UserState::Sampled { block, bits, sample };
            }
            (UserState::Sampled { block, bits, sample }, Body::QberResult(QberResult { sampled, errors })) => {
                if msg.block != block {
                    return Err(LinkError::OutOfOrder {
                        got: msg.block,
                        last: self.last_block,
                    });
                }
                if *sampled != sample.len() as u64 || errors > sampled {
                    return Err(LinkError::ProtocolViolation("result does not match the disclosed sample".into()));
                }
                step.completed = Some(sifted_block(self.user, block, &bits, &sample, *errors));
                self.last_block = Some(block);
                self.state = UserState::Ready;
            }
            (UserState::Revealed { block, .. } | UserState::Sampled { block, .. }, _) if msg.block != block => {
                return Err(LinkError::OutOfOrder {
                    got: msg.block,
                    last: self.last_block,
                });
            }
            (state, body) => {
                let name = state.name();
                self.state = state;
                return Err(LinkError::ProtocolViolation(format!(
                    "{} in state {name}",
                    body.type_name()
                )));
            }
        }
        Ok(step)
    }
}
