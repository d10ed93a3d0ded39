//! How a running round reaches a human (or a stand-in) for confirmations,
//! clarifications, and cancellation.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::domain::PlannedAction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfirmRequest {
    pub app_id: String,
    pub action: PlannedAction,
    pub matched_rule: Option<String>,
}

/// A decision plus whether it was made without a human.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Answer {
    pub decision: Decision,
    pub auto: bool,
}

#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

pub trait Interaction: Send {
    /// `None` means the round was cancelled while waiting.
    fn confirm(&mut self, request: &ConfirmRequest) -> Option<Answer>;
    fn clarify(&mut self, prompt: &str) -> Option<String>;
    fn cancel_token(&self) -> CancelToken;
}

/// Headless default: every risky action is denied.
#[derive(Debug, Default)]
pub struct Headless {
    token: CancelToken,
}

impl Interaction for Headless {
    fn confirm(&mut self, _request: &ConfirmRequest) -> Option<Answer> {
        Some(Answer {
            decision: Decision::Deny,
            auto: true,
        })
    }

    fn clarify(&mut self, _prompt: &str) -> Option<String> {
        None
    }

    fn cancel_token(&self) -> CancelToken {
        self.token.clone()
    }
}

/// Approves every risky action; answers clarifications from a queue.
#[derive(Debug, Default)]
pub struct AutoApprove {
    token: CancelToken,
    replies: VecDeque<String>,
}

impl AutoApprove {
    pub fn with_replies(replies: impl IntoIterator<Item = String>) -> Self {
        Self {
            token: CancelToken::default(),
            replies: replies.into_iter().collect(),
        }
    }
}

impl Interaction for AutoApprove {
    fn confirm(&mut self, _request: &ConfirmRequest) -> Option<Answer> {
        Some(Answer {
            decision: Decision::Approve,
            auto: true,
        })
    }

    fn clarify(&mut self, _prompt: &str) -> Option<String> {
        self.replies.pop_front()
    }

    fn cancel_token(&self) -> CancelToken {
        self.token.clone()
    }
}

/// Pre-recorded human answers, consumed in order. Exhausted decisions deny.
#[derive(Debug, Default)]
pub struct Scripted {
    pub decisions: VecDeque<Decision>,
    pub replies: VecDeque<String>,
    /// Cancel the round once this many confirmations have been asked.
    pub cancel_after_confirms: Option<usize>,
    asked: usize,
    token: CancelToken,
}

impl Scripted {
    pub fn new(decisions: impl IntoIterator<Item = Decision>, replies: impl IntoIterator<Item = String>) -> Self {
        Self {
            decisions: decisions.into_iter().collect(),
            replies: replies.into_iter().collect(),
            ..Self::default()
        }
    }
}

impl Interaction for Scripted {
    fn confirm(&mut self, _request: &ConfirmRequest) -> Option<Answer> {
        self.asked += 1;
        if self.cancel_after_confirms.is_some_and(|n| self.asked > n) {
            self.token.cancel();
            return None;
        }
        Some(Answer {
            decision: self.decisions.pop_front().unwrap_or(Decision::Deny),
            auto: false,
        })
    }

    fn clarify(&mut self, _prompt: &str) -> Option<String> {
        self.replies.pop_front()
    }

    fn cancel_token(&self) -> CancelToken {
        self.token.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Waiting {
    Nothing,
    Confirmation,
    Clarification,
}

enum Command {
    Decide(Decision),
    Reply(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("round is not waiting for {0}")]
pub struct NotWaiting(pub &'static str);

/// Blocks the round until a remote client answers through an
/// [`InteractionHandle`].
pub struct ChannelInteraction {
    rx: mpsc::Receiver<Command>,
    waiting: Arc<Mutex<Waiting>>,
    token: CancelToken,
}

#[derive(Clone)]
pub struct InteractionHandle {
    tx: mpsc::Sender<Command>,
    waiting: Arc<Mutex<Waiting>>,
    token: CancelToken,
}

pub fn channel() -> (ChannelInteraction, InteractionHandle) {
    let (tx, rx) = mpsc::channel();
    let waiting = Arc::new(Mutex::new(Waiting::Nothing));
    let token = CancelToken::default();
    (
        ChannelInteraction {
            rx,
            waiting: Arc::clone(&waiting),
            token: token.clone(),
        },
        InteractionHandle { tx, waiting, token },
    )
}

const POLL: Duration = Duration::from_millis(20);

impl ChannelInteraction {
    fn wait(&mut self, kind: Waiting) -> Option<Command> {
        *self.waiting.lock() = kind;
        let got = loop {
            if self.token.is_cancelled() {
                break None;
            }
            match self.rx.recv_timeout(POLL) {
                Ok(cmd) => break Some(cmd),
                Err(mpsc::RecvTimeoutError::Timeout) => continue,
                Err(mpsc::RecvTimeoutError::Disconnected) => break None,
            }
        };
        *self.waiting.lock() = Waiting::Nothing;
        got
    }
}

impl Interaction for ChannelInteraction {
    fn confirm(&mut self, _request: &ConfirmRequest) -> Option<Answer> {
        loop {
            match self.wait(Waiting::Confirmation)? {
                Command::Decide(decision) => return Some(Answer { decision, auto: false }),
                Command::Reply(_) => continue,
            }
        }
    }

    fn clarify(&mut self, _prompt: &str) -> Option<String> {
        loop {
            match self.wait(Waiting::Clarification)? {
                Command::Reply(text) => return Some(text),
                Command::Decide(_) => continue,
            }
        }
    }

    fn cancel_token(&self) -> CancelToken {
        self.token.clone()
    }
}

impl InteractionHandle {
    pub fn waiting(&self) -> Waiting {
        *self.waiting.lock()
    }

    pub fn decide(&self, decision: Decision) -> Result<(), NotWaiting> {
        self.send(Waiting::Confirmation, Command::Decide(decision), "a confirmation")
    }

    pub fn reply(&self, text: String) -> Result<(), NotWaiting> {
        self.send(Waiting::Clarification, Command::Reply(text), "a clarification")
    }

    pub fn cancel(&self) {
        self.token.cancel();
    }

    fn send(&self, expect: Waiting, cmd: Command, what: &'static str) -> Result<(), NotWaiting> {
        let mut waiting = self.waiting.lock();
        if *waiting != expect {
            return Err(NotWaiting(what));
        }
        *waiting = Waiting::Nothing;
        self.tx.send(cmd).map_err(|_| NotWaiting(what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> ConfirmRequest {
        ConfirmRequest {
            app_id: "fileman".into(),
            action: PlannedAction::click("x"),
            matched_rule: None,
        }
    }

    #[test]
    fn handle_rejects_when_nothing_pending() {
        let (_i, h) = channel();
        assert_eq!(h.decide(Decision::Approve), Err(NotWaiting("a confirmation")));
    }

    #[test]
    fn channel_delivers_decision() {
        let (mut i, h) = channel();
        let t = std::thread::spawn(move || {
            while h.waiting() != Waiting::Confirmation {
                std::thread::sleep(Duration::from_millis(1));
            }
            h.decide(Decision::Approve).unwrap();
        });
        let a = i.confirm(&req()).unwrap();
        t.join().unwrap();
        assert_eq!(a.decision, Decision::Approve);
        assert!(!a.auto);
    }

    #[test]
    fn cancel_unblocks_confirm() {
        let (mut i, h) = channel();
        h.cancel();
        assert!(i.confirm(&req()).is_none());
    }

    #[test]
    fn scripted_runs_out_into_deny() {
        let mut s = Scripted::new([Decision::Approve], []);
        assert_eq!(s.confirm(&req()).unwrap().decision, Decision::Approve);
        assert_eq!(s.confirm(&req()).unwrap().decision, Decision::Deny);
    }
}
