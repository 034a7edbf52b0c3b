//! Gateway to broker signaling dialog.
//!
//! A gateway (the initiating side) sends INVITE with a [`SessionOffer`]; the
//! broker answers 200 with its own offer and the gateway confirms with ACK.
//! Either side may end the dialog with BYE. All transitions are pure
//! functions of the current [`Session`], the inbound message and an injected
//! timestamp.

use thiserror::Error;

use crate::wire::{
    AccessType, CSeq, Method, Role, Security, SessionOffer, SignalMessage, SignalStart,
    MIN_FRAME_SIZE,
};

/// Identity the broker answers with in the `To` header.
pub const BROKER_IDENTITY: &str = "sip:m2m-is@msbc";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("invalid session configuration: {0}")]
    InvalidConfig(String),
    #[error("negotiated frame size {0} is below the minimum of 64 bytes")]
    Unacceptable(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SessionState {
    Idle,
    InviteSent,
    InviteReceived,
    Established,
    Closing,
    Closed,
}

impl SessionState {
    pub const ALL: [SessionState; 6] = [
        SessionState::Idle,
        SessionState::InviteSent,
        SessionState::InviteReceived,
        SessionState::Established,
        SessionState::Closing,
        SessionState::Closed,
    ];
}

/// Which end of the dialog this session object represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// The gateway, which sends INVITE.
    Initiator,
    /// The broker, which answers.
    Answerer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegotiatedChannel {
    pub security: Security,
    pub max_frame_size: u32,
    pub payload_endpoint: String,
}

/// What the answering side contributes to negotiation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalParams {
    pub identity: String,
    pub access: AccessType,
    pub max_frame_size: u32,
    pub payload_endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    /// Gateway identity (the `From` of the INVITE).
    pub subscriber: String,
    pub call_id: String,
    pub role: Role,
    pub provider: Option<String>,
    pub state: SessionState,
    pub negotiated: Option<NegotiatedChannel>,
    /// Access type of the gateway end.
    pub access: AccessType,
    pub last_activity: u64,
    pub remote_endpoint: String,
    side: Side,
    local_uri: String,
    remote_uri: String,
    local_cseq: u32,
    remote_invite_cseq: Option<u32>,
    pending: Option<NegotiatedChannel>,
    local: Option<LocalParams>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SignalAction {
    Send(SignalMessage),
    /// Initiator: the payload connection may now be opened.
    OpenPayloadChannel(NegotiatedChannel),
    /// Answerer: ACK received, the dialog is up.
    Established(NegotiatedChannel),
    /// Initiator: the INVITE was refused.
    Rejected {
        status: u16,
        reason: String,
    },
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keepalive {
    Ok,
    SendPing,
    Expired,
}

/// Issues fresh Call-IDs for one gateway process.
#[derive(Debug, Clone)]
pub struct DialogFactory {
    tag: String,
    issued: u64,
}

impl DialogFactory {
    /// `tag` should be unique per process, e.g. random hex.
    pub fn new(tag: impl Into<String>) -> Self {
        DialogFactory {
            tag: tag.into(),
            issued: 0,
        }
    }

    fn next_call_id(&mut self) -> String {
        self.issued += 1;
        format!("{:08x}@{}", self.issued, self.tag)
    }

    /// Builds the INVITE opening a new dialog. The returned session is in
    /// `InviteSent`.
    #[allow(clippy::too_many_arguments)]
    pub fn make_invite(
        &mut self,
        subscriber: &str,
        role: Role,
        provider: Option<&str>,
        access: AccessType,
        offer: SessionOffer,
        remote_endpoint: &str,
        now: u64,
    ) -> Result<(Session, SignalMessage), SessionError> {
        if role == Role::Asgw && provider.is_none() {
            return Err(SessionError::InvalidConfig(
                "asgw role requires a provider".into(),
            ));
        }
        if offer.role != role || offer.provider.as_deref() != provider {
            return Err(SessionError::InvalidConfig(
                "offer role/provider disagree with the session".into(),
            ));
        }
        offer
            .validate()
            .map_err(|e| SessionError::InvalidConfig(e.to_string()))?;
        let call_id = self.next_call_id();
        let invite = SignalMessage {
            start: SignalStart::Request(Method::Invite),
            from: subscriber.to_owned(),
            to: BROKER_IDENTITY.to_owned(),
            call_id: call_id.clone(),
            cseq: CSeq {
                seq: 1,
                method: Method::Invite,
            },
            access,
            body: Some(offer),
        };
        let session = Session {
            subscriber: subscriber.to_owned(),
            call_id,
            role,
            provider: provider.map(str::to_owned),
            state: SessionState::InviteSent,
            negotiated: None,
            access,
            last_activity: now,
            remote_endpoint: remote_endpoint.to_owned(),
            side: Side::Initiator,
            local_uri: subscriber.to_owned(),
            remote_uri: BROKER_IDENTITY.to_owned(),
            local_cseq: 1,
            remote_invite_cseq: None,
            pending: None,
            local: None,
        };
        Ok((session, invite))
    }
}

/// Computes the answer to `offer`.
///
/// The channel is secure iff either end reaches the network over the
/// internet; radio access is already encrypted by the operator. Frame size
/// is the smaller of the two limits.
pub fn answer_offer(
    offer: &SessionOffer,
    offer_access: AccessType,
    local: &LocalParams,
) -> Result<SessionOffer, SessionError> {
    let security = if offer_access == AccessType::Internet || local.access == AccessType::Internet {
        Security::Secure
    } else {
        Security::Plain
    };
    let max_frame_size = offer.max_frame_size.min(local.max_frame_size);
    if (max_frame_size as usize) < MIN_FRAME_SIZE {
        return Err(SessionError::Unacceptable(max_frame_size));
    }
    Ok(SessionOffer {
        security,
        max_frame_size,
        payload_endpoint: local.payload_endpoint.clone(),
        role: offer.role,
        provider: offer.provider.clone(),
    })
}

impl Session {
    /// A broker-side session waiting for an INVITE.
    pub fn answering(local: LocalParams, remote_endpoint: &str, now: u64) -> Session {
        Session {
            subscriber: String::new(),
            call_id: String::new(),
            role: Role::Lgw,
            provider: None,
            state: SessionState::Idle,
            negotiated: None,
            access: AccessType::Radio,
            last_activity: now,
            remote_endpoint: remote_endpoint.to_owned(),
            side: Side::Answerer,
            local_uri: local.identity.clone(),
            remote_uri: String::new(),
            local_cseq: 0,
            remote_invite_cseq: None,
            pending: None,
            local: Some(local),
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    /// CSeq number of the last request this side sent.
    pub fn local_cseq(&self) -> u32 {
        self.local_cseq
    }

    fn local_access(&self) -> AccessType {
        match (&self.side, &self.local) {
            (Side::Answerer, Some(local)) => local.access,
            _ => self.access,
        }
    }

    fn request(&self, method: Method, seq: u32) -> SignalMessage {
        SignalMessage {
            start: SignalStart::Request(method),
            from: self.local_uri.clone(),
            to: self.remote_uri.clone(),
            call_id: self.call_id.clone(),
            cseq: CSeq { seq, method },
            access: self.local_access(),
            body: None,
        }
    }

    fn enter(&mut self, state: SessionState) {
        self.state = state;
        if state != SessionState::Established {
            self.negotiated = None;
        }
    }

    /// Starts a local teardown: BYE is sent and the session waits in
    /// `Closing` for the 200. Returns `None` if there is no dialog to end.
    pub fn start_bye(&self, now: u64) -> Option<(Session, SignalMessage)> {
        match self.state {
            SessionState::InviteSent | SessionState::InviteReceived | SessionState::Established => {
                let mut next = self.clone();
                next.local_cseq += 1;
                let bye = next.request(Method::Bye, next.local_cseq);
                next.enter(SessionState::Closing);
                next.last_activity = now;
                Some((next, bye))
            }
            _ => None,
        }
    }

    /// Refreshes liveness for any inbound traffic on this session.
    pub fn touch(&mut self, now: u64) {
        self.last_activity = self.last_activity.max(now);
    }
}

fn out_of_dialog(session: &Session, msg: &SignalMessage) -> Vec<SignalAction> {
    match msg.method() {
        Some(Method::Ack) | None => Vec::new(),
        Some(_) => vec![SignalAction::Send(msg.response(
            481,
            "Call/Transaction Does Not Exist",
            session.local_access(),
            None,
        ))],
    }
}

/// Applies one inbound signaling message.
///
/// | state          | INVITE            | ACK            | BYE           | 200 (INVITE)        | 200 (BYE) | error (INVITE) |
/// |----------------|-------------------|----------------|---------------|---------------------|-----------|----------------|
/// | Idle           | InviteReceived    | ignored        | 481           | ignored             | ignored   | ignored        |
/// | InviteSent     | 481               | ignored        | 200, Closed   | ACK, Established    | ignored   | Closed         |
/// | InviteReceived | 481               | Established    | 200, Closed   | ignored             | ignored   | ignored        |
/// | Established    | 481               | ignored        | 200, Closed   | ignored             | ignored   | ignored        |
/// | Closing        | 481               | ignored        | 200, Closed   | ignored             | Closed    | ignored        |
/// | Closed         | 481               | ignored        | 200           | ignored             | ignored   | ignored        |
///
/// Requests with a foreign Call-ID get 481 (ACK is never answered);
/// responses that do not match the outstanding request are dropped.
pub fn on_signal(session: &Session, msg: &SignalMessage, now: u64) -> (Session, Vec<SignalAction>) {
    let mut next = session.clone();
    let fresh_dialog = session.state == SessionState::Idle && session.call_id.is_empty();
    if !fresh_dialog && msg.call_id != session.call_id {
        return (next, out_of_dialog(session, msg));
    }
    let local_access = session.local_access();

    match (&msg.start, session.state) {
        (SignalStart::Request(Method::Invite), SessionState::Idle)
            if session.side == Side::Answerer =>
        {
            next.touch(now);
            let Some(local) = &session.local else {
                return (next, out_of_dialog(session, msg));
            };
            let Some(offer) = &msg.body else {
                return (next, out_of_dialog(session, msg));
            };
            next.subscriber = msg.from.clone();
            next.remote_uri = msg.from.clone();
            next.call_id = msg.call_id.clone();
            next.role = offer.role;
            next.provider = offer.provider.clone();
            next.access = msg.access;
            next.remote_invite_cseq = Some(msg.cseq.seq);
            if offer.role == Role::Asgw && offer.provider.is_none() {
                next.enter(SessionState::Closed);
                let reject = msg.response(400, "Provider Required", local_access, None);
                return (next, vec![SignalAction::Send(reject), SignalAction::Closed]);
            }
            match answer_offer(offer, msg.access, local) {
                Ok(answer) => {
                    next.pending = Some(NegotiatedChannel {
                        security: answer.security,
                        max_frame_size: answer.max_frame_size,
                        payload_endpoint: answer.payload_endpoint.clone(),
                    });
                    next.enter(SessionState::InviteReceived);
                    let ok = msg.response(200, "OK", local_access, Some(answer));
                    (next, vec![SignalAction::Send(ok)])
                }
                Err(_) => {
                    next.enter(SessionState::Closed);
                    let reject = msg.response(488, "Not Acceptable Here", local_access, None);
                    (next, vec![SignalAction::Send(reject), SignalAction::Closed])
                }
            }
        }
        (SignalStart::Request(Method::Ack), SessionState::InviteReceived) => {
            if Some(msg.cseq.seq) != session.remote_invite_cseq {
                return (next, Vec::new());
            }
            next.touch(now);
            let channel = next
                .pending
                .take()
                .expect("pending answer in InviteReceived");
            next.enter(SessionState::Established);
            next.negotiated = Some(channel.clone());
            (next, vec![SignalAction::Established(channel)])
        }
        (SignalStart::Request(Method::Bye), SessionState::Idle) => {
            (next, out_of_dialog(session, msg))
        }
        (SignalStart::Request(Method::Bye), state) => {
            next.touch(now);
            next.pending = None;
            next.enter(SessionState::Closed);
            let ok = msg.response(200, "OK", local_access, None);
            let mut actions = vec![SignalAction::Send(ok)];
            if state != SessionState::Closed {
                actions.push(SignalAction::Closed);
            }
            (next, actions)
        }
        (SignalStart::Request(Method::Ack), _) => (next, Vec::new()),
        (SignalStart::Request(Method::Invite), _) => (next, out_of_dialog(session, msg)),
        (SignalStart::Response { status, reason }, state) => {
            if msg.cseq.seq != session.local_cseq {
                return (next, Vec::new());
            }
            match (state, msg.cseq.method, *status) {
                (SessionState::InviteSent, Method::Invite, 200) => {
                    next.touch(now);
                    let Some(answer) = &msg.body else {
                        return (next, Vec::new());
                    };
                    let secure = answer.security == Security::Secure
                        || session.access == AccessType::Internet
                        || msg.access == AccessType::Internet;
                    let channel = NegotiatedChannel {
                        security: if secure {
                            Security::Secure
                        } else {
                            Security::Plain
                        },
                        max_frame_size: answer.max_frame_size,
                        payload_endpoint: answer.payload_endpoint.clone(),
                    };
                    let ack = next.request(Method::Ack, msg.cseq.seq);
                    next.enter(SessionState::Established);
                    next.negotiated = Some(channel.clone());
                    (
                        next,
                        vec![
                            SignalAction::Send(ack),
                            SignalAction::OpenPayloadChannel(channel),
                        ],
                    )
                }
                (SessionState::InviteSent, Method::Invite, code) if code >= 300 => {
                    next.touch(now);
                    next.enter(SessionState::Closed);
                    (
                        next,
                        vec![
                            SignalAction::Rejected {
                                status: code,
                                reason: reason.clone(),
                            },
                            SignalAction::Closed,
                        ],
                    )
                }
                (SessionState::Closing, Method::Bye, _) => {
                    next.touch(now);
                    next.enter(SessionState::Closed);
                    (next, vec![SignalAction::Closed])
                }
                _ => (next, Vec::new()),
            }
        }
    }
}

/// Liveness check for an established session.
pub fn keepalive_due(session: &Session, now: u64, interval_ms: u64, misses: u32) -> Keepalive {
    let idle = now.saturating_sub(session.last_activity);
    if idle >= interval_ms.saturating_mul(misses as u64) {
        Keepalive::Expired
    } else if idle >= interval_ms {
        Keepalive::SendPing
    } else {
        Keepalive::Ok
    }
}
