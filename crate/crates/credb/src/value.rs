//! The universal value model and its canonical byte encoding.
//!
//! Every byte that gets hashed, signed, sealed, or shipped over the wire is
//! produced by [`canonical_encode`]. The encoding is deterministic: dictionary
//! entries are sorted by key bytes, floats are normalized to a single quiet
//! NaN, and decoding accepts exactly the bytes an encode can produce.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Canonical quiet-NaN bit pattern used for all NaN payloads.
const CANONICAL_NAN: u64 = 0x7ff8_0000_0000_0000;

const TAG_INT: u8 = 0x01;
const TAG_FLOAT: u8 = 0x02;
const TAG_STR: u8 = 0x03;
const TAG_BYTES: u8 = 0x04;
const TAG_LIST: u8 = 0x05;
const TAG_MAP: u8 = 0x06;
const TAG_BOOL: u8 = 0x07;
const TAG_TOMBSTONE: u8 = 0x08;

/// A datastore value: integers, floats, strings, binary data, lists,
/// string-keyed dictionaries, booleans, and the tombstone marker for
/// deleted objects.
#[derive(Debug, Clone)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
    Bytes(Vec<u8>),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
    Bool(bool),
    Tombstone,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed encoding: {0}")]
pub struct MalformedEncoding(pub String);

fn canonical_float_bits(f: f64) -> u64 {
    if f.is_nan() {
        CANONICAL_NAN
    } else {
        f.to_bits()
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => {
                canonical_float_bits(*a) == canonical_float_bits(*b)
            }
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::Bytes(a), Value::Bytes(b)) => a == b,
            (Value::List(a), Value::List(b)) => a == b,
            (Value::Map(a), Value::Map(b)) => a == b,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Tombstone, Value::Tombstone) => true,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Value {
    pub fn map_from<I: IntoIterator<Item = (&'static str, Value)>>(entries: I) -> Value {
        Value::Map(
            entries
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        )
    }

    pub fn str(s: impl Into<String>) -> Value {
        Value::Str(s.into())
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Str(_) => "str",
            Value::Bytes(_) => "bytes",
            Value::List(_) => "list",
            Value::Map(_) => "dict",
            Value::Bool(_) => "bool",
            Value::Tombstone => "tombstone",
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, Value>> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn is_tombstone(&self) -> bool {
        matches!(self, Value::Tombstone)
    }

    /// Looks up a dot-separated field path in nested dictionaries.
    /// An empty path designates the value itself.
    pub fn get_path(&self, path: &str) -> Option<&Value> {
        if path.is_empty() {
            return Some(self);
        }
        let mut cur = self;
        for seg in path.split('.') {
            match cur {
                Value::Map(m) => cur = m.get(seg)?,
                _ => return None,
            }
        }
        Some(cur)
    }

    /// Returns a copy with `path` set to `v`, creating intermediate
    /// dictionaries as needed. Fails if a path segment crosses a
    /// non-dictionary value.
    pub fn with_path_set(&self, path: &str, v: Value) -> Result<Value, PathError> {
        if path.is_empty() {
            return Ok(v);
        }
        let mut root = match self {
            Value::Map(m) => m.clone(),
            Value::Tombstone => BTreeMap::new(),
            _ => return Err(PathError(path.to_string())),
        };
        set_in(&mut root, path, v).map_err(|_| PathError(path.to_string()))?;
        Ok(Value::Map(root))
    }

    /// True when Tombstone occurs, if at all, only as the whole value.
    pub fn tombstone_only_top_level(&self) -> bool {
        fn nested_ok(v: &Value) -> bool {
            match v {
                Value::Tombstone => false,
                Value::List(l) => l.iter().all(nested_ok),
                Value::Map(m) => m.values().all(nested_ok),
                _ => true,
            }
        }
        match self {
            Value::Tombstone => true,
            Value::List(l) => l.iter().all(nested_ok),
            Value::Map(m) => m.values().all(nested_ok),
            _ => true,
        }
    }

    /// Rough byte footprint used by the interpreter's memory meter.
    pub fn approx_size(&self) -> u64 {
        match self {
            Value::Int(_) | Value::Float(_) | Value::Bool(_) | Value::Tombstone => 16,
            Value::Str(s) => 24 + s.len() as u64,
            Value::Bytes(b) => 24 + b.len() as u64,
            Value::List(l) => 24 + l.iter().map(Value::approx_size).sum::<u64>(),
            Value::Map(m) => {
                24 + m
                    .iter()
                    .map(|(k, v)| 24 + k.len() as u64 + v.approx_size())
                    .sum::<u64>()
            }
        }
    }

    /// Total order over values: by type rank, then content. Floats use IEEE
    /// total ordering on canonical bits. Used by `sorted()` in the policy
    /// language and anywhere a deterministic order over mixed values is
    /// needed.
    pub fn total_cmp(&self, other: &Value) -> std::cmp::Ordering {
        use std::cmp::Ordering;
        fn rank(v: &Value) -> u8 {
            match v {
                Value::Tombstone => 0,
                Value::Bool(_) => 1,
                Value::Int(_) => 2,
                Value::Float(_) => 3,
                Value::Str(_) => 4,
                Value::Bytes(_) => 5,
                Value::List(_) => 6,
                Value::Map(_) => 7,
            }
        }
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Float(a), Value::Float(b)) => a.total_cmp(b),
            (Value::Int(a), Value::Float(b)) => (*a as f64).total_cmp(b),
            (Value::Float(a), Value::Int(b)) => a.total_cmp(&(*b as f64)),
            (Value::Str(a), Value::Str(b)) => a.cmp(b),
            (Value::Bytes(a), Value::Bytes(b)) => a.cmp(b),
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            (Value::List(a), Value::List(b)) => {
                for (x, y) in a.iter().zip(b.iter()) {
                    let ord = x.total_cmp(y);
                    if ord != Ordering::Equal {
                        return ord;
                    }
                }
                a.len().cmp(&b.len())
            }
            (Value::Map(a), Value::Map(b)) => {
                for ((ka, va), (kb, vb)) in a.iter().zip(b.iter()) {
                    let ord = ka.cmp(kb).then_with(|| va.total_cmp(vb));
                    if ord != Ordering::Equal {
                        return ord;
                    }
                }
                a.len().cmp(&b.len())
            }
            (a, b) => rank(a).cmp(&rank(b)),
        }
    }
}

fn set_in(map: &mut BTreeMap<String, Value>, path: &str, v: Value) -> Result<(), ()> {
    match path.split_once('.') {
        None => {
            map.insert(path.to_string(), v);
            Ok(())
        }
        Some((head, rest)) => {
            let entry = map
                .entry(head.to_string())
                .or_insert_with(|| Value::Map(BTreeMap::new()));
            match entry {
                Value::Map(inner) => set_in(inner, rest, v),
                _ => Err(()),
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("cannot set field path {0:?}: intermediate value is not a dictionary")]
pub struct PathError(pub String);

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::Bytes(b) => write!(f, "bytes({})", hex::encode(b)),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Tombstone => write!(f, "⊥"),
            Value::List(l) => {
                write!(f, "[")?;
                for (i, v) in l.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v}")?;
                }
                write!(f, "]")
            }
            Value::Map(m) => {
                write!(f, "{{")?;
                for (i, (k, v)) in m.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{k:?}: {v}")?;
                }
                write!(f, "}}")
            }
        }
    }
}

/// Encodes a value into its unique canonical byte string.
pub fn canonical_encode(v: &Value) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    encode_into(v, &mut out);
    out
}

pub fn encode_into(v: &Value, out: &mut Vec<u8>) {
    match v {
        Value::Int(i) => {
            out.push(TAG_INT);
            out.extend_from_slice(&i.to_le_bytes());
        }
        Value::Float(f) => {
            out.push(TAG_FLOAT);
            out.extend_from_slice(&canonical_float_bits(*f).to_le_bytes());
        }
        Value::Str(s) => {
            out.push(TAG_STR);
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        Value::Bytes(b) => {
            out.push(TAG_BYTES);
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            out.extend_from_slice(b);
        }
        Value::List(items) => {
            out.push(TAG_LIST);
            out.extend_from_slice(&(items.len() as u32).to_le_bytes());
            for item in items {
                encode_into(item, out);
            }
        }
        Value::Map(entries) => {
            out.push(TAG_MAP);
            out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
            // BTreeMap iterates in ascending key-byte order.
            for (k, val) in entries {
                out.push(TAG_STR);
                out.extend_from_slice(&(k.len() as u32).to_le_bytes());
                out.extend_from_slice(k.as_bytes());
                encode_into(val, out);
            }
        }
        Value::Bool(b) => {
            out.push(TAG_BOOL);
            out.push(u8::from(*b));
        }
        Value::Tombstone => out.push(TAG_TOMBSTONE),
    }
}

/// Decodes a canonical byte string, consuming all input. Rejects anything
/// [`canonical_encode`] could not have produced: unknown tags, truncation,
/// trailing bytes, unsorted or duplicate dictionary keys, non-canonical
/// NaN bits, and out-of-range booleans.
pub fn canonical_decode(b: &[u8]) -> Result<Value, MalformedEncoding> {
    let mut cur = Cursor { buf: b, pos: 0 };
    let v = decode_one(&mut cur)?;
    if cur.pos != b.len() {
        return Err(MalformedEncoding(format!(
            "{} trailing bytes",
            b.len() - cur.pos
        )));
    }
    Ok(v)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MalformedEncoding> {
        if self.buf.len() - self.pos < n {
            return Err(MalformedEncoding("truncated input".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8, MalformedEncoding> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, MalformedEncoding> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn decode_str(cur: &mut Cursor) -> Result<String, MalformedEncoding> {
    let len = cur.u32()? as usize;
    let bytes = cur.take(len)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| MalformedEncoding("invalid utf-8".into()))
}

fn decode_one(cur: &mut Cursor) -> Result<Value, MalformedEncoding> {
    match cur.byte()? {
        TAG_INT => {
            let b = cur.take(8)?;
            Ok(Value::Int(i64::from_le_bytes(b.try_into().unwrap())))
        }
        TAG_FLOAT => {
            let b = cur.take(8)?;
            let bits = u64::from_le_bytes(b.try_into().unwrap());
            let f = f64::from_bits(bits);
            if f.is_nan() && bits != CANONICAL_NAN {
                return Err(MalformedEncoding("non-canonical NaN".into()));
            }
            Ok(Value::Float(f))
        }
        TAG_STR => Ok(Value::Str(decode_str(cur)?)),
        TAG_BYTES => {
            let len = cur.u32()? as usize;
            Ok(Value::Bytes(cur.take(len)?.to_vec()))
        }
        TAG_LIST => {
            let count = cur.u32()? as usize;
            let mut items = Vec::new();
            for _ in 0..count {
                items.push(decode_one(cur)?);
            }
            Ok(Value::List(items))
        }
        TAG_MAP => {
            let count = cur.u32()? as usize;
            let mut map = BTreeMap::new();
            let mut prev: Option<String> = None;
            for _ in 0..count {
                if cur.byte()? != TAG_STR {
                    return Err(MalformedEncoding("dictionary key is not a string".into()));
                }
                let key = decode_str(cur)?;
                if let Some(p) = &prev {
                    if key.as_bytes() <= p.as_bytes() {
                        return Err(MalformedEncoding(
                            "dictionary keys not strictly ascending".into(),
                        ));
                    }
                }
                let val = decode_one(cur)?;
                prev = Some(key.clone());
                map.insert(key, val);
            }
            Ok(Value::Map(map))
        }
        TAG_BOOL => match cur.byte()? {
            0 => Ok(Value::Bool(false)),
            1 => Ok(Value::Bool(true)),
            b => Err(MalformedEncoding(format!("bool byte {b:#04x}"))),
        },
        TAG_TOMBSTONE => Ok(Value::Tombstone),
        t => Err(MalformedEncoding(format!("unknown tag {t:#04x}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn integer_zero_encodes_as_tag_plus_zero_bytes() {
        let b = canonical_encode(&Value::Int(0));
        assert_eq!(b, vec![TAG_INT, 0, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn dictionary_encoding_is_order_insensitive() {
        let mut m1 = BTreeMap::new();
        m1.insert("b".to_string(), Value::Int(1));
        m1.insert("a".to_string(), Value::Int(2));
        let mut m2 = BTreeMap::new();
        m2.insert("a".to_string(), Value::Int(2));
        m2.insert("b".to_string(), Value::Int(1));
        assert_eq!(
            canonical_encode(&Value::Map(m1)),
            canonical_encode(&Value::Map(m2))
        );
    }

    #[test]
    fn simple_round_trip() {
        let v = Value::str("x");
        assert_eq!(canonical_decode(&canonical_encode(&v)).unwrap(), v);
    }

    #[test]
    fn empty_input_is_malformed() {
        assert!(canonical_decode(&[]).is_err());
    }

    #[test]
    fn trailing_bytes_are_malformed() {
        let mut b = canonical_encode(&Value::Bool(true));
        b.push(0);
        assert!(canonical_decode(&b).is_err());
    }

    #[test]
    fn out_of_order_dictionary_keys_rejected() {
        // Hand-build a two-entry map with entries swapped out of order.
        let mut b = vec![TAG_MAP];
        b.extend_from_slice(&2u32.to_le_bytes());
        for key in ["b", "a"] {
            b.push(TAG_STR);
            b.extend_from_slice(&(key.len() as u32).to_le_bytes());
            b.extend_from_slice(key.as_bytes());
            b.extend_from_slice(&canonical_encode(&Value::Int(1)));
        }
        let err = canonical_decode(&b).unwrap_err();
        assert!(err.0.contains("ascending"), "{err}");
    }

    #[test]
    fn duplicate_dictionary_keys_rejected() {
        let mut b = vec![TAG_MAP];
        b.extend_from_slice(&2u32.to_le_bytes());
        for _ in 0..2 {
            b.push(TAG_STR);
            b.extend_from_slice(&1u32.to_le_bytes());
            b.push(b'a');
            b.extend_from_slice(&canonical_encode(&Value::Int(1)));
        }
        assert!(canonical_decode(&b).is_err());
    }

    #[test]
    fn nan_payloads_normalize() {
        let weird_nan = f64::from_bits(0x7ff8_0000_0000_1234);
        let enc = canonical_encode(&Value::Float(weird_nan));
        let canon = canonical_encode(&Value::Float(f64::NAN));
        assert_eq!(enc, canon);
        assert_eq!(canonical_decode(&enc).unwrap(), Value::Float(f64::NAN));
    }

    #[test]
    fn non_canonical_nan_bits_rejected() {
        let mut b = vec![TAG_FLOAT];
        b.extend_from_slice(&0x7ff8_0000_0000_0001u64.to_le_bytes());
        assert!(canonical_decode(&b).is_err());
    }

    #[test]
    fn path_lookup_and_set() {
        let v = Value::map_from([(
            "acl",
            Value::map_from([("alice", Value::Int(3))]),
        )]);
        assert_eq!(v.get_path("acl.alice"), Some(&Value::Int(3)));
        assert_eq!(v.get_path("acl.bob"), None);
        assert_eq!(v.get_path(""), Some(&v));
        let v2 = v.with_path_set("acl.bob", Value::Int(1)).unwrap();
        assert_eq!(v2.get_path("acl.bob"), Some(&Value::Int(1)));
        assert_eq!(v2.get_path("acl.alice"), Some(&Value::Int(3)));
    }

    #[test]
    fn tombstone_nesting_detected() {
        assert!(Value::Tombstone.tombstone_only_top_level());
        assert!(Value::Int(1).tombstone_only_top_level());
        let nested = Value::List(vec![Value::Tombstone]);
        assert!(!nested.tombstone_only_top_level());
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            any::<i64>().prop_map(Value::Int),
            any::<f64>().prop_map(Value::Float),
            ".{0,12}".prop_map(Value::Str),
            proptest::collection::vec(any::<u8>(), 0..24).prop_map(Value::Bytes),
            any::<bool>().prop_map(Value::Bool),
            Just(Value::Tombstone),
        ];
        leaf.prop_recursive(3, 64, 6, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..6).prop_map(Value::List),
                proptest::collection::btree_map(".{0,8}", inner, 0..6).prop_map(Value::Map),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_random_values(v in arb_value()) {
            let enc = canonical_encode(&v);
            let dec = canonical_decode(&enc).unwrap();
            prop_assert_eq!(&dec, &v);
            // Canonicality: re-encoding the decoded value is bit-identical.
            prop_assert_eq!(canonical_encode(&dec), enc);
        }
    }
}
