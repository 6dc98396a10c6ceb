//! Aggregation strategies and per-route correlation buckets.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::definition::{AggregationStrategy, Completion};
use super::RouteError;
use crate::expr::Expr;
use crate::message::{BodyValue, Exchange, ExchangePattern};
use crate::term::{parse_term, Term};

impl AggregationStrategy {
    /// Folds `next` into the running aggregate.
    pub fn aggregate(
        &self,
        acc: Option<Exchange>,
        mut next: Exchange,
    ) -> Result<Exchange, RouteError> {
        match self {
            AggregationStrategy::ListAppend => Ok(match acc {
                None => {
                    let b = std::mem::take(&mut next.in_msg.body);
                    next.set_body(BodyValue::ListOf(vec![b]));
                    next
                }
                Some(mut acc) => {
                    let b = std::mem::take(&mut next.in_msg.body);
                    match &mut acc.in_msg.body {
                        BodyValue::ListOf(items) => items.push(b),
                        other => {
                            let first = std::mem::take(other);
                            *other = BodyValue::ListOf(vec![first, b]);
                        }
                    }
                    acc
                }
            }),
            AggregationStrategy::SetUnion => {
                let mut set = match &acc {
                    Some(a) => set_elements(a.body())?,
                    None => BTreeMap::new(),
                };
                set.extend(set_elements(next.body())?);
                let mut base = acc.unwrap_or(next);
                base.set_body(BodyValue::ListOf(set.into_values().collect()));
                Ok(base)
            }
            AggregationStrategy::CombineBodyAndHeader(name) => Ok(match acc {
                None => next,
                Some(acc) => {
                    let (mut base, donor) =
                        match (acc.header(name).is_some(), next.header(name).is_some()) {
                            (true, false) => (next, acc),
                            _ => (acc, next),
                        };
                    if let Some(v) = donor.header(name) {
                        base.set_header(name.clone(), v.clone());
                    }
                    base
                }
            }),
        }
    }
}

/// Elements of a body read as a term list, keyed by their rendered form so
/// the union is ordered and duplicate-free.
fn set_elements(body: &BodyValue) -> Result<BTreeMap<String, BodyValue>, RouteError> {
    let items: Vec<BodyValue> = match body {
        BodyValue::ListOf(items) => items.clone(),
        BodyValue::Empty => Vec::new(),
        BodyValue::Text(t) => match parse_term(t)? {
            Term::List(items) => items.iter().map(BodyValue::from_term).collect(),
            other => vec![BodyValue::from_term(&other)],
        },
        other => {
            return Err(RouteError::TypeMismatch(format!(
                "set union needs a list body, got `{}`",
                other.to_text()
            )))
        }
    };
    Ok(items
        .into_iter()
        .map(|v| (v.to_term().to_string(), v))
        .collect())
}

struct Bucket {
    acc: Exchange,
    count: usize,
    first_at: Instant,
}

/// Runtime state of one aggregate step.
pub(crate) struct Aggregator {
    correlation: Expr,
    strategy: AggregationStrategy,
    completion: Completion,
    buckets: Mutex<HashMap<String, Bucket>>,
}

impl Aggregator {
    pub(crate) fn new(
        correlation: Expr,
        strategy: AggregationStrategy,
        completion: Completion,
    ) -> Self {
        Aggregator {
            correlation,
            strategy,
            completion,
            buckets: Mutex::new(HashMap::new()),
        }
    }

    /// Merges `x` into its bucket, returning the aggregate when the bucket
    /// completes by size.
    pub(crate) fn offer(&self, x: Exchange) -> Result<Option<Exchange>, RouteError> {
        let key = self.correlation.eval_text(&x)?;
        let target = match &self.completion {
            Completion::Size(n) => Some(*n),
            Completion::SizeExpr(e) => Some(size_value(&e.eval(&x)?)?),
            Completion::Timeout(_) => None,
        };
        let mut buckets = self.buckets.lock();
        let (acc, count, first_at) = match buckets.remove(&key) {
            Some(b) => (Some(b.acc), b.count, b.first_at),
            None => (None, 0, Instant::now()),
        };
        let mut merged = self.strategy.aggregate(acc, x)?;
        let count = count + 1;
        if target.is_some_and(|n| count >= n) {
            merged.set_pattern(ExchangePattern::InOnly);
            return Ok(Some(merged));
        }
        buckets.insert(
            key,
            Bucket {
                acc: merged,
                count,
                first_at,
            },
        );
        Ok(None)
    }

    /// Removes and returns buckets whose timeout has elapsed at `now`.
    pub(crate) fn take_expired(&self, now: Instant) -> Vec<Exchange> {
        let Completion::Timeout(limit) = self.completion else {
            return Vec::new();
        };
        let mut buckets = self.buckets.lock();
        let expired: Vec<String> = buckets
            .iter()
            .filter(|(_, b)| now.duration_since(b.first_at) >= limit)
            .map(|(k, _)| k.clone())
            .collect();
        let mut out: Vec<(Instant, Exchange)> = expired
            .into_iter()
            .filter_map(|k| buckets.remove(&k))
            .map(|b| (b.first_at, b.acc))
            .collect();
        out.sort_by_key(|(t, _)| *t);
        out.into_iter()
            .map(|(_, mut x)| {
                x.set_pattern(ExchangePattern::InOnly);
                x
            })
            .collect()
    }

    pub(crate) fn pending(&self) -> usize {
        self.buckets.lock().len()
    }

    pub(crate) fn timeout(&self) -> Option<Duration> {
        match self.completion {
            Completion::Timeout(d) => Some(d),
            _ => None,
        }
    }
}

fn size_value(v: &BodyValue) -> Result<usize, RouteError> {
    let n = match v {
        BodyValue::Number(n) => Some(*n),
        BodyValue::Text(t) => t.trim().parse::<f64>().ok(),
        _ => None,
    };
    match n {
        Some(n) if n >= 1.0 && n.fract() == 0.0 => Ok(n as usize),
        _ => Err(RouteError::TypeMismatch(format!(
            "completion size must be a positive integer, got `{}`",
            v.to_text()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::Headers;

    fn ex(body: &str) -> Exchange {
        Exchange::new(
            ExchangePattern::InOnly,
            BodyValue::text(body),
            Headers::new(),
        )
    }

    #[test]
    fn combine_body_and_header_takes_mail_body() {
        let strategy = AggregationStrategy::CombineBodyAndHeader("to".into());
        let mail = ex("the mail")
            .with_header("id", "\"ID-1\"")
            .with_header("subject", "s");
        let summary = Exchange::in_only(BodyValue::texts(["u1@x"]))
            .with_header("id", "\"ID-1\"")
            .with_header("to", r#"["u1@x"]"#);
        for (a, b) in [(mail.clone(), summary.clone()), (summary, mail)] {
            let out = strategy
                .aggregate(Some(strategy.aggregate(None, a).unwrap()), b)
                .unwrap();
            assert_eq!(out.body(), &BodyValue::text("the mail"));
            assert_eq!(out.header("to"), Some(&BodyValue::text(r#"["u1@x"]"#)));
            assert_eq!(out.header("subject"), Some(&BodyValue::text("s")));
        }
    }

    #[test]
    fn set_union_merges_term_lists() {
        let s = AggregationStrategy::SetUnion;
        let a = s.aggregate(None, ex(r#"["u1@x"]"#)).unwrap();
        let b = s.aggregate(Some(a), ex(r#"["u1@x","u2@x"]"#)).unwrap();
        assert_eq!(b.body(), &BodyValue::texts(["u1@x", "u2@x"]));
        assert_eq!(b.body().to_text(), r#"["u1@x","u2@x"]"#);
        let empty = s.aggregate(None, ex("[]")).unwrap();
        assert_eq!(empty.body(), &BodyValue::ListOf(vec![]));
        assert!(s.aggregate(None, ex("[unclosed")).is_err());
    }

    #[test]
    fn list_append_keeps_order() {
        let s = AggregationStrategy::ListAppend;
        let mut acc = None;
        for b in ["x", "y", "z"] {
            acc = Some(s.aggregate(acc, ex(b)).unwrap());
        }
        assert_eq!(acc.unwrap().body(), &BodyValue::texts(["x", "y", "z"]));
    }

    #[test]
    fn size_one_passes_through() {
        let agg = Aggregator::new(
            Expr::constant("k"),
            AggregationStrategy::ListAppend,
            Completion::Size(1),
        );
        for b in ["a", "b"] {
            let out = agg.offer(ex(b)).unwrap().unwrap();
            assert_eq!(out.body(), &BodyValue::texts([b]));
        }
        assert_eq!(agg.pending(), 0);
    }

    #[test]
    fn size_counts_messages_per_key() {
        let agg = Aggregator::new(
            Expr::header("id"),
            AggregationStrategy::ListAppend,
            Completion::Size(2),
        );
        assert!(agg.offer(ex("a").with_header("id", "1")).unwrap().is_none());
        assert!(agg.offer(ex("b").with_header("id", "2")).unwrap().is_none());
        let done = agg.offer(ex("c").with_header("id", "1")).unwrap().unwrap();
        assert_eq!(done.body(), &BodyValue::texts(["a", "c"]));
        assert_eq!(agg.pending(), 1);
    }

    #[test]
    fn size_from_header() {
        let agg = Aggregator::new(
            Expr::header("n"),
            AggregationStrategy::ListAppend,
            Completion::SizeExpr(Expr::header("n")),
        );
        assert!(agg.offer(ex("a").with_header("n", 2.0)).unwrap().is_none());
        assert!(agg.offer(ex("b").with_header("n", 2.0)).unwrap().is_some());
        assert!(agg.offer(ex("c").with_header("n", 0.0)).is_err());
    }

    #[test]
    fn timeout_buckets_expire() {
        let agg = Aggregator::new(
            Expr::header("id"),
            AggregationStrategy::SetUnion,
            Completion::Timeout(Duration::from_millis(2000)),
        );
        let t0 = Instant::now();
        assert!(agg
            .offer(ex(r#"["u1@x"]"#).with_header("id", "k"))
            .unwrap()
            .is_none());
        assert!(agg
            .offer(ex(r#"["u1@x","u2@x"]"#).with_header("id", "k"))
            .unwrap()
            .is_none());
        assert!(agg.take_expired(t0).is_empty());
        let out = agg.take_expired(t0 + Duration::from_millis(2100));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].body(), &BodyValue::texts(["u1@x", "u2@x"]));
        assert_eq!(agg.pending(), 0);
    }
}
