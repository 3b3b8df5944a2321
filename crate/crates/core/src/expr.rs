//! Laurent polynomials with rational coefficients over named size parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_rational::Ratio;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Coef = Ratio<i128>;

/// Variable name to (possibly negative) exponent. Zero exponents are never stored.
pub type Monomial = BTreeMap<String, i32>;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Expr {
    terms: BTreeMap<Monomial, Coef>,
}

/// `big >= small`, both sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assumption {
    pub big: String,
    pub small: String,
}

impl Assumption {
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (l, r) = if let Some((l, r)) = s.split_once(">=") {
            (l, r)
        } else if let Some((l, r)) = s.split_once('>') {
            (l, r)
        } else if let Some((l, r)) = s.split_once("<=") {
            (r, l)
        } else if let Some((l, r)) = s.split_once('<') {
            (r, l)
        } else {
            return Err(format!("assumption `{s}` must look like `x>d`"));
        };
        let (big, small) = (l.trim(), r.trim());
        if big.is_empty() || small.is_empty() {
            return Err(format!("assumption `{s}` is missing an operand"));
        }
        Ok(Assumption { big: big.to_string(), small: small.to_string() })
    }
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} > {}", self.big, self.small)
    }
}

impl Expr {
    pub fn zero() -> Self {
        Expr::default()
    }

    pub fn one() -> Self {
        Expr::int(1)
    }

    pub fn int(v: i128) -> Self {
        Expr::constant(Coef::from_integer(v))
    }

    pub fn constant(c: Coef) -> Self {
        let mut terms = BTreeMap::new();
        if !c.is_zero() {
            terms.insert(Monomial::new(), c);
        }
        Expr { terms }
    }

    pub fn ratio(n: i128, d: i128) -> Self {
        Expr::constant(Coef::new(n, d))
    }

    pub fn var(name: &str) -> Self {
        Expr::monomial(Coef::one(), [(name.to_string(), 1)])
    }

    pub fn monomial(c: Coef, vars: impl IntoIterator<Item = (String, i32)>) -> Self {
        let mut m = Monomial::new();
        for (v, e) in vars {
            *m.entry(v).or_insert(0) += e;
        }
        m.retain(|_, e| *e != 0);
        let mut terms = BTreeMap::new();
        if !c.is_zero() {
            terms.insert(m, c);
        }
        Expr { terms }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &Coef)> {
        self.terms.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn as_constant(&self) -> Option<Coef> {
        match self.terms.len() {
            0 => Some(Coef::zero()),
            1 => self.terms.get(&Monomial::new()).copied(),
            _ => None,
        }
    }

    /// The single monomial of this expression, if it has exactly one term.
    pub fn as_monomial(&self) -> Option<(&Monomial, Coef)> {
        if self.terms.len() == 1 {
            self.terms.iter().next().map(|(m, c)| (m, *c))
        } else {
            None
        }
    }

    pub fn variables(&self) -> BTreeSet<String> {
        self.terms.keys().flat_map(|m| m.keys().cloned()).collect()
    }

    fn add_term(&mut self, m: Monomial, c: Coef) {
        if c.is_zero() {
            return;
        }
        let entry = self.terms.entry(m).or_insert_with(Coef::zero);
        *entry += c;
        if entry.is_zero() {
            self.terms.retain(|_, c| !c.is_zero());
        }
    }

    pub fn scale(&self, c: Coef) -> Expr {
        let mut out = Expr::zero();
        for (m, k) in &self.terms {
            out.add_term(m.clone(), *k * c);
        }
        out
    }

    /// Integer power; negative powers only for monomials.
    pub fn pow(&self, e: i32) -> Option<Expr> {
        if e >= 0 {
            let mut out = Expr::one();
            for _ in 0..e {
                out = &out * self;
            }
            return Some(out);
        }
        let (m, c) = self.as_monomial()?;
        let inv_c = c.recip();
        let mut out = Expr::one();
        let base = Expr::monomial(inv_c, m.iter().map(|(v, k)| (v.clone(), -k)));
        for _ in 0..(-e) {
            out = &out * &base;
        }
        Some(out)
    }

    /// Division; only defined when the divisor is a single monomial.
    pub fn checked_div(&self, rhs: &Expr) -> Option<Expr> {
        let inv = rhs.pow(-1)?;
        Some(self * &inv)
    }

    /// Replace `var` with `value`. Negative powers of `var` need a monomial value.
    pub fn subs(&self, var: &str, value: &Expr) -> Option<Expr> {
        let mut out = Expr::zero();
        for (m, c) in &self.terms {
            let mut rest = m.clone();
            let e = rest.remove(var).unwrap_or(0);
            let factor = value.pow(e)?;
            let base = Expr { terms: BTreeMap::from([(rest, *c)]) };
            out = &out + &(&base * &factor);
        }
        Some(out)
    }

    pub fn subs_all(&self, values: &BTreeMap<String, Expr>) -> Option<Expr> {
        let mut out = self.clone();
        for (k, v) in values {
            out = out.subs(k, v)?;
        }
        Some(out)
    }

    /// Evaluate with a lookup; errors name the first unbound variable.
    pub fn eval_with(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64, String> {
        let mut total = 0.0;
        for (m, c) in &self.terms {
            let mut t = coef_f64(*c);
            for (v, e) in m {
                let x = lookup(v).ok_or_else(|| format!("unbound parameter `{v}`"))?;
                t *= x.powi(*e);
            }
            total += t;
        }
        Ok(total)
    }

    pub fn eval(&self, bindings: &BTreeMap<String, f64>) -> Result<f64, String> {
        self.eval_with(&|v| bindings.get(v).copied())
    }

    /// Bind whichever variables have values, leaving the rest symbolic.
    pub fn partial_eval(&self, bindings: &BTreeMap<String, f64>) -> Expr {
        let mut out = Expr::zero();
        for (m, c) in &self.terms {
            let mut rest = Monomial::new();
            let mut factor = 1.0f64;
            for (v, e) in m {
                match bindings.get(v) {
                    Some(x) => factor *= x.powi(*e),
                    None => {
                        rest.insert(v.clone(), *e);
                    }
                }
            }
            let k = *c * f64_to_coef(factor);
            out.add_term(rest, k);
        }
        out
    }

    /// Proves `self >= other` for all sizes >= 1 under the given assumptions.
    /// Sound but incomplete: `false` means "not proven".
    pub fn proven_ge(&self, other: &Expr, assumptions: &[Assumption]) -> bool {
        let diff = self - other;
        let mut positive: Vec<(Monomial, Coef)> = Vec::new();
        let mut negative: Vec<(Monomial, Coef)> = Vec::new();
        for (m, c) in &diff.terms {
            if c.is_positive() {
                positive.push((m.clone(), *c));
            } else {
                negative.push((m.clone(), -*c));
            }
        }
        let closure = ge_closure(assumptions);
        for (nm, mut need) in negative {
            for (pm, cap) in positive.iter_mut() {
                if need.is_zero() {
                    break;
                }
                if cap.is_zero() || !monomial_dominates(pm, &nm, &closure) {
                    continue;
                }
                let used = if *cap >= need { need } else { *cap };
                *cap -= used;
                need -= used;
            }
            if !need.is_zero() {
                return false;
            }
        }
        true
    }

    pub fn parse(src: &str) -> Result<Expr, String> {
        let mut p = Parser { chars: src.chars().collect(), pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.chars.len() {
            return Err(format!("unexpected `{}` at offset {} in `{src}`", p.chars[p.pos], p.pos));
        }
        Ok(e)
    }
}

pub fn coef_f64(c: Coef) -> f64 {
    c.numer().to_f64().unwrap_or(f64::NAN) / c.denom().to_f64().unwrap_or(f64::NAN)
}

/// Exact for integers and dyadic fractions that fit; otherwise a close rational.
pub fn f64_to_coef(x: f64) -> Coef {
    if x.fract() == 0.0 && x.abs() < 1e30 {
        return Coef::from_integer(x as i128);
    }
    Ratio::<i128>::approximate_float(x).unwrap_or_else(|| Coef::from_integer(x.round() as i128))
}

fn ge_closure(assumptions: &[Assumption]) -> BTreeSet<(String, String)> {
    let mut set: BTreeSet<(String, String)> =
        assumptions.iter().map(|a| (a.big.clone(), a.small.clone())).collect();
    loop {
        let mut added = Vec::new();
        for (a, b) in &set {
            for (c, d) in &set {
                if b == c && !set.contains(&(a.clone(), d.clone())) {
                    added.push((a.clone(), d.clone()));
                }
            }
        }
        if added.is_empty() {
            return set;
        }
        set.extend(added);
    }
}

/// `p >= n` pointwise for all variables >= 1 and the closure of assumptions.
fn monomial_dominates(p: &Monomial, n: &Monomial, ge: &BTreeSet<(String, String)>) -> bool {
    let mut k: BTreeMap<String, i32> = p.clone();
    for (v, e) in n {
        *k.entry(v.clone()).or_insert(0) -= e;
    }
    let deficits: Vec<(String, i32)> =
        k.iter().filter(|(_, e)| **e < 0).map(|(v, e)| (v.clone(), -*e)).collect();
    for (v, mut need) in deficits {
        let candidates: Vec<String> = k
            .iter()
            .filter(|(u, e)| **e > 0 && ge.contains(&((*u).clone(), v.clone())))
            .map(|(u, _)| u.clone())
            .collect();
        for u in candidates {
            if need == 0 {
                break;
            }
            let avail = k[&u];
            let used = avail.min(need);
            *k.get_mut(&u).unwrap() -= used;
            need -= used;
        }
        if need > 0 {
            return false;
        }
    }
    true
}

impl std::ops::Add for &Expr {
    type Output = Expr;
    fn add(self, rhs: &Expr) -> Expr {
        let mut out = self.clone();
        for (m, c) in &rhs.terms {
            out.add_term(m.clone(), *c);
        }
        out
    }
}

impl std::ops::Sub for &Expr {
    type Output = Expr;
    fn sub(self, rhs: &Expr) -> Expr {
        let mut out = self.clone();
        for (m, c) in &rhs.terms {
            out.add_term(m.clone(), -*c);
        }
        out
    }
}

impl std::ops::Mul for &Expr {
    type Output = Expr;
    fn mul(self, rhs: &Expr) -> Expr {
        let mut out = Expr::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &rhs.terms {
                let mut m = ma.clone();
                for (v, e) in mb {
                    *m.entry(v.clone()).or_insert(0) += e;
                }
                m.retain(|_, e| *e != 0);
                out.add_term(m, *ca * *cb);
            }
        }
        out
    }
}

impl std::ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        self.scale(-Coef::one())
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        &self + &rhs
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        &self * &rhs
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        &self - &rhs
    }
}

impl std::iter::Sum for Expr {
    fn sum<I: Iterator<Item = Expr>>(iter: I) -> Expr {
        iter.fold(Expr::zero(), |a, b| &a + &b)
    }
}

impl std::iter::Product for Expr {
    fn product<I: Iterator<Item = Expr>>(iter: I) -> Expr {
        iter.fold(Expr::one(), |a, b| &a * &b)
    }
}

fn degree(m: &Monomial) -> i32 {
    m.values().sum()
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut ordered: Vec<(&Monomial, &Coef)> = self.terms.iter().collect();
        ordered.sort_by(|(a, _), (b, _)| degree(b).cmp(&degree(a)).then_with(|| a.cmp(b)));
        for (i, (m, c)) in ordered.into_iter().enumerate() {
            let neg = c.is_negative();
            let mag = c.abs();
            if i == 0 {
                if neg {
                    write!(f, "-")?;
                }
            } else if neg {
                write!(f, " - ")?;
            } else {
                write!(f, " + ")?;
            }
            let mut parts: Vec<String> = Vec::new();
            if !mag.is_one() || m.is_empty() {
                if mag.is_integer() {
                    parts.push(mag.numer().to_string());
                } else {
                    parts.push(format!("{}/{}", mag.numer(), mag.denom()));
                }
            }
            for (v, e) in m.iter() {
                if *e == 1 {
                    parts.push(v.clone());
                } else {
                    parts.push(format!("{v}^{e}"));
                }
            }
            write!(f, "{}", parts.join("*"))?;
        }
        Ok(())
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(i64),
            Float(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => Expr::parse(&s).map_err(serde::de::Error::custom),
            Raw::Int(i) => Ok(Expr::int(i as i128)),
            Raw::Float(x) => Ok(Expr::constant(f64_to_coef(x))),
        }
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr, String> {
        let mut acc = match self.peek() {
            Some('-') => {
                self.pos += 1;
                -&self.term()?
            }
            _ => self.term()?,
        };
        loop {
            match self.peek() {
                Some('+') => {
                    self.pos += 1;
                    acc = &acc + &self.term()?;
                }
                Some('-') => {
                    self.pos += 1;
                    acc = &acc - &self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, String> {
        let mut acc = self.factor()?;
        loop {
            match self.peek() {
                Some('*') | Some('·') => {
                    self.pos += 1;
                    acc = &acc * &self.factor()?;
                }
                Some('/') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    acc = acc
                        .checked_div(&rhs)
                        .ok_or_else(|| format!("cannot divide by non-monomial `{rhs}`"))?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, String> {
        let base = self.atom()?;
        if self.peek() == Some('^') {
            self.pos += 1;
            let neg = if self.peek() == Some('-') {
                self.pos += 1;
                true
            } else {
                false
            };
            let start = self.pos;
            while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            let digits: String = self.chars[start..self.pos].iter().collect();
            let e: i32 = digits.parse().map_err(|_| format!("bad exponent at offset {start}"))?;
            let e = if neg { -e } else { e };
            return base.pow(e).ok_or_else(|| format!("negative power of non-monomial `{base}`"));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, String> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(format!("expected `)` at offset {}", self.pos));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.pos < self.chars.len()
                    && (self.chars[self.pos].is_ascii_digit() || self.chars[self.pos] == '.')
                {
                    self.pos += 1;
                }
                let text: String = self.chars[start..self.pos].iter().collect();
                parse_decimal(&text).map(Expr::constant)
            }
            Some(c) if c.is_alphabetic() || c == '_' => {
                let start = self.pos;
                while self.pos < self.chars.len()
                    && (self.chars[self.pos].is_alphanumeric()
                        || self.chars[self.pos] == '_'
                        || self.chars[self.pos] == '\'')
                {
                    self.pos += 1;
                }
                let name: String = self.chars[start..self.pos].iter().collect();
                Ok(Expr::var(&name))
            }
            Some(c) => Err(format!("unexpected `{c}` at offset {}", self.pos)),
            None => Err("unexpected end of expression".to_string()),
        }
    }
}

fn parse_decimal(text: &str) -> Result<Coef, String> {
    match text.split_once('.') {
        None => text.parse::<i128>().map(Coef::from_integer).map_err(|e| e.to_string()),
        Some((int, frac)) => {
            let scale = 10i128.pow(frac.len() as u32);
            let whole: i128 = if int.is_empty() { 0 } else { int.parse().map_err(|_| format!("bad number `{text}`"))? };
            let part: i128 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| format!("bad number `{text}`"))? };
            Ok(Coef::new(whole * scale + part, scale))
        }
    }
}
