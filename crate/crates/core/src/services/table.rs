//! In-memory relational tables with a minimal `SELECT` and change
//! notifications published to a broker topic.

use std::collections::BTreeMap;
use std::sync::{Arc, LazyLock};

use parking_lot::RwLock;
use regex::Regex;
use thiserror::Error;

use super::broker::Broker;
use super::records::Record;
use crate::message::{BodyValue, EndpointUri, Exchange, RowSet};
use crate::route::{Component, Producer, RouteContext, RouteError};
use crate::term::Term;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("unsupported sql `{0}`")]
    UnsupportedSql(String),
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown column `{column}` in `{table}`")]
    UnknownColumn { table: String, column: String },
    #[error("table `{0}` already exists")]
    TableExists(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeKind {
    Added,
    Removed,
    Updated,
}

impl ChangeKind {
    fn suffix(self) -> &'static str {
        match self {
            ChangeKind::Added => "added",
            ChangeKind::Removed => "removed",
            ChangeKind::Updated => "updated",
        }
    }
}

/// Change descriptor term such as `account_added("x@y")`.
pub fn change_descriptor(prefix: &str, kind: ChangeKind, key: &str) -> Term {
    Term::compound(
        format!("{prefix}_{}", kind.suffix()),
        vec![Term::string(key)],
    )
}

#[derive(Debug, Clone)]
struct Notify {
    topic: String,
    prefix: String,
    key_column: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn column(&self, table: &str, name: &str) -> Result<usize, TableError> {
        self.columns
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name))
            .ok_or_else(|| TableError::UnknownColumn {
                table: table.to_owned(),
                column: name.to_owned(),
            })
    }
}

#[derive(Default)]
struct StoreState {
    tables: BTreeMap<String, Table>,
    notify: BTreeMap<String, Notify>,
}

#[derive(Clone)]
pub struct TableStore {
    name: String,
    state: Arc<RwLock<StoreState>>,
    broker: Option<Broker>,
}

static SELECT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?is)^\s*select\s+(.+?)\s+from\s+([A-Za-z_][A-Za-z0-9_]*)\s*;?\s*$")
        .expect("valid select pattern")
});
static IDENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*$").expect("valid identifier pattern"));

impl TableStore {
    /// A data source named `name`; notifications go through `broker` when
    /// given.
    pub fn new(name: impl Into<String>, broker: Option<Broker>) -> Self {
        TableStore {
            name: name.into(),
            state: Arc::default(),
            broker,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn create_table(&self, table: &str, columns: &[&str]) -> Result<(), TableError> {
        let mut st = self.state.write();
        if st.tables.contains_key(table) {
            return Err(TableError::TableExists(table.to_owned()));
        }
        st.tables.insert(
            table.to_owned(),
            Table {
                columns: columns.iter().map(|c| (*c).to_owned()).collect(),
                rows: Vec::new(),
            },
        );
        Ok(())
    }

    /// Publishes `{prefix}_added/removed/updated(key)` to `topic` on every
    /// mutation of `table`.
    pub fn notify_changes(
        &self,
        table: &str,
        key_column: &str,
        topic: &str,
        prefix: &str,
    ) -> Result<(), TableError> {
        let mut st = self.state.write();
        let t = st
            .tables
            .get(table)
            .ok_or_else(|| TableError::UnknownTable(table.to_owned()))?;
        let key_column = t.column(table, key_column)?;
        st.notify.insert(
            table.to_owned(),
            Notify {
                topic: topic.to_owned(),
                prefix: prefix.to_owned(),
                key_column,
            },
        );
        Ok(())
    }

    fn publish(&self, n: Option<Notify>, kind: ChangeKind, key: &str, table: &str) {
        let (Some(n), Some(broker)) = (n, &self.broker) else {
            return;
        };
        let body = change_descriptor(&n.prefix, kind, key).to_string();
        broker.publish(
            &n.topic,
            Exchange::in_only(body).with_header("table", table),
        );
    }

    /// Inserts a row given as column/value pairs; missing columns are empty.
    pub fn insert(&self, table: &str, values: &[(&str, &str)]) -> Result<(), TableError> {
        let (notify, key) = {
            let mut st = self.state.write();
            let t = st
                .tables
                .get_mut(table)
                .ok_or_else(|| TableError::UnknownTable(table.to_owned()))?;
            let mut row = vec![String::new(); t.columns.len()];
            for (c, v) in values {
                row[t.column(table, c)?] = (*v).to_owned();
            }
            t.rows.push(row.clone());
            let notify = st.notify.get(table).cloned();
            let key = notify
                .as_ref()
                .map(|n| row[n.key_column].clone())
                .unwrap_or_default();
            (notify, key)
        };
        self.publish(notify, ChangeKind::Added, &key, table);
        Ok(())
    }

    /// Deletes rows where `column == value`; returns how many went.
    pub fn delete(&self, table: &str, column: &str, value: &str) -> Result<usize, TableError> {
        let (notify, removed) = {
            let mut st = self.state.write();
            let t = st
                .tables
                .get_mut(table)
                .ok_or_else(|| TableError::UnknownTable(table.to_owned()))?;
            let c = t.column(table, column)?;
            let (gone, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut t.rows)
                .into_iter()
                .partition(|r| r[c] == value);
            t.rows = kept;
            let notify = st.notify.get(table).cloned();
            let keys: Vec<String> = notify
                .as_ref()
                .map(|n| gone.iter().map(|r| r[n.key_column].clone()).collect())
                .unwrap_or_default();
            (notify, (gone.len(), keys))
        };
        for k in &removed.1 {
            self.publish(notify.clone(), ChangeKind::Removed, k, table);
        }
        Ok(removed.0)
    }

    /// Sets `set_column` on rows where `column == value`.
    pub fn update(
        &self,
        table: &str,
        column: &str,
        value: &str,
        set_column: &str,
        new_value: &str,
    ) -> Result<usize, TableError> {
        let (notify, keys) = {
            let mut st = self.state.write();
            let t = st
                .tables
                .get_mut(table)
                .ok_or_else(|| TableError::UnknownTable(table.to_owned()))?;
            let c = t.column(table, column)?;
            let s = t.column(table, set_column)?;
            let mut touched = Vec::new();
            for r in t.rows.iter_mut().filter(|r| r[c] == value) {
                r[s] = new_value.to_owned();
                touched.push(r.clone());
            }
            let notify = st.notify.get(table).cloned();
            let keys: Vec<String> = notify
                .as_ref()
                .map(|n| touched.iter().map(|r| r[n.key_column].clone()).collect())
                .unwrap_or_else(|| vec![String::new(); touched.len()]);
            (notify, keys)
        };
        for k in &keys {
            self.publish(notify.clone(), ChangeKind::Updated, k, table);
        }
        Ok(keys.len())
    }

    pub fn snapshot(&self, table: &str) -> Option<Table> {
        self.state.read().tables.get(table).cloned()
    }

    /// Runs `SELECT col[, col...] FROM table` (or `SELECT *`).
    pub fn query(&self, sql: &str) -> Result<RowSet, TableError> {
        let caps = SELECT
            .captures(sql)
            .ok_or_else(|| TableError::UnsupportedSql(sql.to_owned()))?;
        let table = &caps[2];
        let st = self.state.read();
        let t = st
            .tables
            .get(table)
            .ok_or_else(|| TableError::UnknownTable(table.to_owned()))?;
        let list = caps[1].trim();
        let (names, idx): (Vec<String>, Vec<usize>) = if list == "*" {
            (t.columns.clone(), (0..t.columns.len()).collect())
        } else {
            let mut names = Vec::new();
            let mut idx = Vec::new();
            for c in list.split(',').map(str::trim) {
                if !IDENT.is_match(c) {
                    return Err(TableError::UnsupportedSql(sql.to_owned()));
                }
                idx.push(t.column(table, c)?);
                names.push(c.to_owned());
            }
            (names, idx)
        };
        let mut rs = RowSet::new(names);
        for row in &t.rows {
            rs.push(idx.iter().map(|&i| row[i].clone()).collect())
                .expect("row width matches selected columns");
        }
        Ok(rs)
    }

    /// Inserts one row per fixture record.
    pub fn load_records(&self, table: &str, records: &[Record]) -> Result<usize, TableError> {
        for r in records {
            let pairs: Vec<(&str, &str)> = r
                .fields
                .iter()
                .map(|(k, v)| (k.as_str(), v.as_str()))
                .collect();
            self.insert(table, &pairs)?;
        }
        Ok(records.len())
    }
}

/// `table:DATASOURCE`: the body is a query; the reply body is its row set.
pub struct TableComponent {
    store: TableStore,
}

impl TableComponent {
    pub fn new(store: TableStore) -> Self {
        TableComponent { store }
    }
}

struct TableProducer {
    store: TableStore,
    uri: EndpointUri,
}

impl Producer for TableProducer {
    fn process(&self, mut x: Exchange) -> Result<Exchange, RouteError> {
        let sql = x.body().to_text();
        let rows = self
            .store
            .query(&sql)
            .map_err(|e| RouteError::endpoint(&self.uri, e))?;
        x.set_body(BodyValue::RowSet(rows));
        Ok(x)
    }
}

impl Component for TableComponent {
    fn create_producer(
        &self,
        uri: &EndpointUri,
        _ctx: &RouteContext,
    ) -> Result<Arc<dyn Producer>, RouteError> {
        if uri.path != self.store.name {
            return Err(RouteError::init(
                uri,
                format!("unknown data source `{}`", uri.path),
            ));
        }
        Ok(Arc::new(TableProducer {
            store: self.store.clone(),
            uri: uri.clone(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn users() -> TableStore {
        let s = TableStore::new("dataSource", None);
        s.create_table("users", &["email", "interests"]).unwrap();
        s.insert("users", &[("email", "a@x"), ("interests", "budget")])
            .unwrap();
        s.insert("users", &[("email", "b@x"), ("interests", "travel")])
            .unwrap();
        s
    }

    #[test]
    fn select_columns_in_insertion_order() {
        let s = users();
        let rs = s.query("select email from users").unwrap();
        assert_eq!(rs.columns(), ["email"]);
        let emails: Vec<&str> = rs.rows().map(|r| r[0].as_str()).collect();
        assert_eq!(emails, ["a@x", "b@x"]);
        let rs = s.query("SELECT email, interests FROM users;").unwrap();
        assert_eq!(rs.columns().len(), 2);
        assert_eq!(s.query("select * From users").unwrap().len(), 2);
    }

    #[test]
    fn select_errors() {
        let s = users();
        assert_eq!(
            s.query("select email from nope"),
            Err(TableError::UnknownTable("nope".into()))
        );
        assert!(matches!(
            s.query("select phone from users"),
            Err(TableError::UnknownColumn { .. })
        ));
        assert!(matches!(
            s.query("delete from users"),
            Err(TableError::UnsupportedSql(_))
        ));
        assert!(matches!(
            s.query("select a+b from users"),
            Err(TableError::UnsupportedSql(_))
        ));
    }

    #[test]
    fn query_is_read_only() {
        let s = users();
        let before = s.snapshot("users");
        s.query("select * from users").unwrap();
        assert_eq!(s.snapshot("users"), before);
    }

    #[test]
    fn mutations_publish_descriptors() {
        let broker = Broker::new();
        let s = TableStore::new("ds", Some(broker.clone()));
        s.create_table("users", &["email", "interests"]).unwrap();
        s.insert("users", &[("email", "quiet@x")]).unwrap();
        s.notify_changes("users", "email", "account-changes", "account")
            .unwrap();
        let sub = broker.subscribe("account-changes");
        s.insert("users", &[("email", "x@y")]).unwrap();
        s.update("users", "email", "x@y", "interests", "budget")
            .unwrap();
        assert_eq!(s.delete("users", "email", "x@y").unwrap(), 1);
        let got: Vec<String> = sub
            .receiver()
            .try_iter()
            .map(|x| x.body().to_text())
            .collect();
        assert_eq!(
            got,
            [
                r#"account_added("x@y")"#,
                r#"account_updated("x@y")"#,
                r#"account_removed("x@y")"#
            ]
        );
        assert_eq!(s.snapshot("users").unwrap().rows.len(), 1);
    }
}
