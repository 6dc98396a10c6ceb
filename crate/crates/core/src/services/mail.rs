//! Mail store with per-account folders, a polling consumer and a sending
//! producer.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use super::records::{Record, RecordError};
use crate::message::{BodyValue, EndpointUri, Exchange};
use crate::route::events::FORWARD;
use crate::route::{
    spawn_poller, Component, Consumer, Producer, RouteContext, RouteError, RouteInlet,
};
use crate::term::{parse_term, Term};

pub const INBOX: &str = "INBOX";
const DEFAULT_POLL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MailError {
    #[error("unknown mail account `{0}`")]
    UnknownAccount(String),
    #[error("mail has no recipients")]
    MissingRecipients,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MailMessage {
    pub id: String,
    pub from: String,
    pub subject: String,
    pub to: Vec<String>,
    pub body: String,
    pub unread: bool,
}

#[derive(Default)]
struct MailState {
    accounts: BTreeMap<String, BTreeMap<String, Vec<MailMessage>>>,
    next_id: u64,
}

impl MailState {
    fn deliver(&mut self, account: &str, mut mail: MailMessage) -> String {
        self.next_id += 1;
        mail.id = format!("mail-{}", self.next_id);
        mail.unread = true;
        let id = mail.id.clone();
        self.accounts
            .entry(account.to_owned())
            .or_default()
            .entry(INBOX.to_owned())
            .or_default()
            .push(mail);
        id
    }
}

#[derive(Clone, Default)]
pub struct MailStore {
    state: Arc<Mutex<MailState>>,
}

impl MailStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_account(&self, account: &str) {
        self.state
            .lock()
            .accounts
            .entry(account.to_owned())
            .or_default()
            .entry(INBOX.to_owned())
            .or_default();
    }

    pub fn has_account(&self, account: &str) -> bool {
        self.state.lock().accounts.contains_key(account)
    }

    /// Drops a message into `account`'s inbox (creating the account) and
    /// returns the store-assigned id.
    pub fn deliver(&self, account: &str, from: &str, subject: &str, body: &str) -> String {
        self.state.lock().deliver(
            account,
            MailMessage {
                id: String::new(),
                from: from.to_owned(),
                subject: subject.to_owned(),
                to: vec![account.to_owned()],
                body: body.to_owned(),
                unread: true,
            },
        )
    }

    /// One copy per recipient inbox; returns the number delivered.
    pub fn send(
        &self,
        from: &str,
        to: &[String],
        subject: &str,
        body: &str,
    ) -> Result<usize, MailError> {
        if to.is_empty() {
            return Err(MailError::MissingRecipients);
        }
        let mut st = self.state.lock();
        for rcpt in to {
            st.deliver(
                rcpt,
                MailMessage {
                    id: String::new(),
                    from: from.to_owned(),
                    subject: subject.to_owned(),
                    to: to.to_vec(),
                    body: body.to_owned(),
                    unread: true,
                },
            );
        }
        Ok(to.len())
    }

    /// Takes the unread inbox mail. Polled mail is removed when `delete`,
    /// otherwise marked read; with `copy_to` a copy lands in that folder.
    pub fn poll(
        &self,
        account: &str,
        delete: bool,
        copy_to: Option<&str>,
    ) -> Result<Vec<MailMessage>, MailError> {
        let mut st = self.state.lock();
        let folders = st
            .accounts
            .get_mut(account)
            .ok_or_else(|| MailError::UnknownAccount(account.to_owned()))?;
        let inbox = folders.entry(INBOX.to_owned()).or_default();
        let mut polled = Vec::new();
        inbox.retain_mut(|m| {
            if !m.unread {
                return true;
            }
            m.unread = false;
            polled.push(m.clone());
            !delete
        });
        if let Some(folder) = copy_to {
            folders
                .entry(folder.to_owned())
                .or_default()
                .extend(polled.iter().cloned());
        }
        Ok(polled)
    }

    pub fn folder(&self, account: &str, folder: &str) -> Vec<MailMessage> {
        self.state
            .lock()
            .accounts
            .get(account)
            .and_then(|f| f.get(folder))
            .cloned()
            .unwrap_or_default()
    }

    pub fn inbox(&self, account: &str) -> Vec<MailMessage> {
        self.folder(account, INBOX)
    }

    /// Total messages across every account's inbox.
    pub fn total_inbox_count(&self) -> usize {
        self.state
            .lock()
            .accounts
            .values()
            .map(|f| f.get(INBOX).map_or(0, Vec::len))
            .sum()
    }

    /// Loads fixture records with fields `to`, `from`, `subject`, `body`.
    pub fn load_records(&self, records: &[Record]) -> Result<usize, RecordError> {
        for r in records {
            self.deliver(
                r.require("to")?,
                r.get("from").unwrap_or(""),
                r.get("subject").unwrap_or(""),
                r.get("body").unwrap_or(""),
            );
        }
        Ok(records.len())
    }
}

/// Reads a recipient list from a header value: a list, a term list text
/// such as `["a@x","b@x"]`, or comma-separated addresses.
pub fn recipients(v: &BodyValue) -> Vec<String> {
    match v {
        BodyValue::ListOf(items) => items
            .iter()
            .map(|v| v.as_text().map_or_else(|| v.to_text(), str::to_owned))
            .collect(),
        BodyValue::Text(t) => match parse_term(t) {
            Ok(Term::List(items)) => items.iter().map(Term::as_text).collect(),
            _ => t
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_owned)
                .collect(),
        },
        BodyValue::Empty => Vec::new(),
        other => vec![other.to_text()],
    }
}

/// `mail:ACCOUNT?delete=&copyTo=&delay=` polling consumer.
pub struct MailComponent {
    store: MailStore,
}

impl MailComponent {
    pub fn new(store: MailStore) -> Self {
        MailComponent { store }
    }
}

struct MailConsumer {
    store: MailStore,
    uri: EndpointUri,
    account: String,
    delete: bool,
    copy_to: Option<String>,
    delay: Duration,
    thread: Option<JoinHandle<()>>,
}

fn mail_exchange(m: MailMessage) -> Exchange {
    Exchange::in_only(m.body)
        .with_header("from", m.from)
        .with_header("subject", m.subject)
        .with_header("id", m.id)
}

impl Consumer for MailConsumer {
    fn start(&mut self, inlet: RouteInlet) -> Result<(), RouteError> {
        if !self.store.has_account(&self.account) {
            return Err(RouteError::init(
                &self.uri,
                MailError::UnknownAccount(self.account.clone()),
            ));
        }
        let (store, account, delete, copy_to) = (
            self.store.clone(),
            self.account.clone(),
            self.delete,
            self.copy_to.clone(),
        );
        self.thread = Some(spawn_poller(
            inlet,
            &self.account,
            self.delay,
            move |em| match store.poll(&account, delete, copy_to.as_deref()) {
                Ok(mails) => {
                    for m in mails {
                        if let Err(e) = em.submit(mail_exchange(m)) {
                            tracing::warn!("mail hand-off failed: {e}");
                        }
                    }
                }
                Err(e) => tracing::warn!("mail poll failed: {e}"),
            },
        ));
        Ok(())
    }

    fn stop(&mut self) {
        self.thread.take();
    }
}

impl Component for MailComponent {
    fn create_consumer(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Box<dyn Consumer>, RouteError> {
        let delay = match uri.param("delay") {
            Some(d) => Duration::from_millis(
                d.parse()
                    .map_err(|_| RouteError::init(uri, "delay must be milliseconds"))?,
            ),
            None => DEFAULT_POLL,
        };
        Ok(Box::new(MailConsumer {
            store: self.store.clone(),
            uri: uri.clone(),
            account: uri.path.clone(),
            delete: uri.param_bool("delete").unwrap_or(false),
            copy_to: uri.param("copyTo").map(str::to_owned),
            delay,
            thread: None,
        }))
    }

    fn receive_once(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Option<Exchange>, RouteError> {
        let mut mails = self
            .store
            .poll(
                &uri.path,
                uri.param_bool("delete").unwrap_or(false),
                uri.param("copyTo"),
            )
            .map_err(|e| RouteError::endpoint(uri, e))?;
        Ok((!mails.is_empty()).then(|| mail_exchange(mails.remove(0))))
    }
}

/// `mailto:ACCOUNT` sends the exchange body to every address in the `to`
/// header. `from` defaults to the account.
pub struct MailtoComponent {
    store: MailStore,
}

impl MailtoComponent {
    pub fn new(store: MailStore) -> Self {
        MailtoComponent { store }
    }
}

struct MailtoProducer {
    store: MailStore,
    uri: EndpointUri,
    account: String,
    ctx: crate::route::WeakContext,
}

impl Producer for MailtoProducer {
    fn process(&self, x: Exchange) -> Result<Exchange, RouteError> {
        let to = x.header("to").map(recipients).unwrap_or_default();
        let from = x
            .in_msg
            .header_text("from")
            .unwrap_or_else(|| self.account.clone());
        let subject = x.in_msg.header_text("subject").unwrap_or_default();
        let body = x.body().to_text();
        self.store
            .send(&from, &to, &subject, &body)
            .map_err(|e| RouteError::endpoint(&self.uri, e))?;
        if let Some(ctx) = self.ctx.upgrade() {
            for rcpt in &to {
                ctx.events().record(
                    &self.uri.base(),
                    FORWARD,
                    x.id().as_str(),
                    format!("to={rcpt} subject={subject}"),
                );
            }
        }
        Ok(x)
    }
}

impl Component for MailtoComponent {
    fn create_producer(
        &self,
        uri: &EndpointUri,
        ctx: &RouteContext,
    ) -> Result<Arc<dyn Producer>, RouteError> {
        Ok(Arc::new(MailtoProducer {
            store: self.store.clone(),
            uri: uri.clone(),
            account: uri.path.clone(),
            ctx: ctx.downgrade(),
        }))
    }
}
