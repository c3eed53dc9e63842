//! Integer expressions over the runtime token count, with folding and a
//! reverse-Polish form for runtime patching.

use alloc::boxed::Box;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    /// Floor division.
    Div,
    Min,
    Max,
    CeilDiv,
}

impl BinOp {
    pub const ALL: [BinOp; 7] = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Min, BinOp::Max, BinOp::CeilDiv];

    pub fn apply(self, a: i64, b: i64) -> Result<i64> {
        let overflow = || Error::Expr(alloc::format!("{self:?} overflows on {a}, {b}"));
        match self {
            BinOp::Add => a.checked_add(b).ok_or_else(overflow),
            BinOp::Sub => a.checked_sub(b).ok_or_else(overflow),
            BinOp::Mul => a.checked_mul(b).ok_or_else(overflow),
            BinOp::Min => Ok(a.min(b)),
            BinOp::Max => Ok(a.max(b)),
            BinOp::Div | BinOp::CeilDiv => {
                if b == 0 {
                    return Err(Error::Expr("division by zero".into()));
                }
                let q = a.checked_div(b).ok_or_else(overflow)?;
                let inexact = a % b != 0;
                let same_sign = (a < 0) == (b < 0);
                Ok(match self {
                    BinOp::Div if inexact && !same_sign => q - 1,
                    BinOp::CeilDiv if inexact && same_sign => q + 1,
                    _ => q,
                })
            }
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Min => "min",
            BinOp::Max => "max",
            BinOp::CeilDiv => "ceildiv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SymExpr {
    Const(i64),
    Token,
    Bin(BinOp, Box<SymExpr>, Box<SymExpr>),
}

impl SymExpr {
    pub fn token() -> Self {
        SymExpr::Token
    }

    pub fn c(v: i64) -> Self {
        SymExpr::Const(v)
    }

    pub fn bin(op: BinOp, a: SymExpr, b: SymExpr) -> Self {
        SymExpr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn min(self, o: SymExpr) -> Self {
        Self::bin(BinOp::Min, self, o)
    }

    pub fn max(self, o: SymExpr) -> Self {
        Self::bin(BinOp::Max, self, o)
    }

    pub fn div(self, o: SymExpr) -> Self {
        Self::bin(BinOp::Div, self, o)
    }

    pub fn ceil_div(self, o: SymExpr) -> Self {
        Self::bin(BinOp::CeilDiv, self, o)
    }

    pub fn eval(&self, token: i64) -> Result<i64> {
        match self {
            SymExpr::Const(v) => Ok(*v),
            SymExpr::Token => Ok(token),
            SymExpr::Bin(op, a, b) => op.apply(a.eval(token)?, b.eval(token)?),
        }
    }

    pub fn as_const(&self) -> Option<i64> {
        match self {
            SymExpr::Const(v) => Some(*v),
            _ => None,
        }
    }

    pub fn depends_on_token(&self) -> bool {
        match self {
            SymExpr::Const(_) => false,
            SymExpr::Token => true,
            SymExpr::Bin(_, a, b) => a.depends_on_token() || b.depends_on_token(),
        }
    }

    /// Evaluates constant subtrees and drops neutral operands. Subtrees
    /// whose evaluation fails are kept so the failure surfaces at runtime.
    pub fn fold(&self) -> SymExpr {
        match self {
            SymExpr::Bin(op, a, b) => {
                let (a, b) = (a.fold(), b.fold());
                if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
                    if let Ok(v) = op.apply(x, y) {
                        return SymExpr::Const(v);
                    }
                }
                match (op, a.as_const(), b.as_const()) {
                    (BinOp::Add, Some(0), _) => b,
                    (BinOp::Add | BinOp::Sub, _, Some(0)) => a,
                    (BinOp::Mul, Some(1), _) => b,
                    (BinOp::Mul | BinOp::Div | BinOp::CeilDiv, _, Some(1)) => a,
                    (BinOp::Min | BinOp::Max, _, _) if a == b => a,
                    _ => SymExpr::bin(*op, a, b),
                }
            }
            e => e.clone(),
        }
    }

    /// Replaces the token by a constant and folds.
    pub fn bind(&self, token: i64) -> SymExpr {
        match self {
            SymExpr::Token => SymExpr::Const(token),
            SymExpr::Const(v) => SymExpr::Const(*v),
            SymExpr::Bin(op, a, b) => SymExpr::bin(*op, a.bind(token), b.bind(token)),
        }
        .fold()
    }

    pub fn to_rpn(&self) -> Vec<RpnOp> {
        let mut out = Vec::new();
        self.push_rpn(&mut out);
        out
    }

    fn push_rpn(&self, out: &mut Vec<RpnOp>) {
        match self {
            SymExpr::Const(v) => out.push(RpnOp::Const(*v)),
            SymExpr::Token => out.push(RpnOp::Token),
            SymExpr::Bin(op, a, b) => {
                a.push_rpn(out);
                b.push_rpn(out);
                out.push(RpnOp::Op(*op));
            }
        }
    }

    pub fn from_rpn(ops: &[RpnOp]) -> Result<SymExpr> {
        let mut st: Vec<SymExpr> = Vec::new();
        for op in ops {
            match op {
                RpnOp::Const(v) => st.push(SymExpr::Const(*v)),
                RpnOp::Token => st.push(SymExpr::Token),
                RpnOp::Op(o) => {
                    let b = st.pop().ok_or_else(|| Error::Expr("stack underflow".into()))?;
                    let a = st.pop().ok_or_else(|| Error::Expr("stack underflow".into()))?;
                    st.push(SymExpr::bin(*o, a, b));
                }
            }
        }
        match (st.pop(), st.is_empty()) {
            (Some(e), true) => Ok(e),
            _ => Err(Error::Expr("expression does not reduce to one value".into())),
        }
    }
}

impl From<i64> for SymExpr {
    fn from(v: i64) -> Self {
        SymExpr::Const(v)
    }
}

impl core::ops::Add for SymExpr {
    type Output = SymExpr;
    fn add(self, o: SymExpr) -> SymExpr {
        SymExpr::bin(BinOp::Add, self, o)
    }
}

impl core::ops::Sub for SymExpr {
    type Output = SymExpr;
    fn sub(self, o: SymExpr) -> SymExpr {
        SymExpr::bin(BinOp::Sub, self, o)
    }
}

impl core::ops::Mul for SymExpr {
    type Output = SymExpr;
    fn mul(self, o: SymExpr) -> SymExpr {
        SymExpr::bin(BinOp::Mul, self, o)
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymExpr::Const(v) => write!(f, "{v}"),
            SymExpr::Token => f.write_str("token"),
            SymExpr::Bin(op @ (BinOp::Min | BinOp::Max | BinOp::CeilDiv), a, b) => write!(f, "{}({a}, {b})", op.symbol()),
            SymExpr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
        }
    }
}

/// One element of a reverse-Polish expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RpnOp {
    Const(i64),
    Token,
    Op(BinOp),
}

impl RpnOp {
    pub fn encode(ops: &[RpnOp], out: &mut Vec<u8>) {
        for op in ops {
            match op {
                RpnOp::Const(v) => {
                    out.push(0);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                RpnOp::Token => out.push(1),
                RpnOp::Op(o) => out.push(2 + BinOp::ALL.iter().position(|x| x == o).unwrap() as u8),
            }
        }
    }

    pub fn decode(mut bytes: &[u8]) -> Result<Vec<RpnOp>> {
        let mut out = Vec::new();
        while let Some((&tag, rest)) = bytes.split_first() {
            bytes = rest;
            out.push(match tag {
                0 => {
                    if bytes.len() < 8 {
                        return Err(Error::Malformed("truncated constant".into()));
                    }
                    let (v, rest) = bytes.split_at(8);
                    bytes = rest;
                    RpnOp::Const(i64::from_le_bytes(v.try_into().unwrap()))
                }
                1 => RpnOp::Token,
                t if (t as usize) < 2 + BinOp::ALL.len() => RpnOp::Op(BinOp::ALL[t as usize - 2]),
                t => return Err(Error::Malformed(alloc::format!("unknown expression tag {t}"))),
            });
        }
        Ok(out)
    }
}

/// Stack evaluation of a reverse-Polish expression.
pub fn eval_rpn(ops: &[RpnOp], token: i64) -> Result<i64> {
    let mut st: Vec<i64> = Vec::with_capacity(8);
    for op in ops {
        match op {
            RpnOp::Const(v) => st.push(*v),
            RpnOp::Token => st.push(token),
            RpnOp::Op(o) => {
                let b = st.pop().ok_or_else(|| Error::Expr("stack underflow".into()))?;
                let a = st.pop().ok_or_else(|| Error::Expr("stack underflow".into()))?;
                st.push(o.apply(a, b)?);
            }
        }
    }
    match (st.pop(), st.is_empty()) {
        (Some(v), true) => Ok(v),
        _ => Err(Error::Expr("expression does not reduce to one value".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn division_rounding() {
        assert_eq!(BinOp::Div.apply(7, 2).unwrap(), 3);
        assert_eq!(BinOp::Div.apply(-7, 2).unwrap(), -4);
        assert_eq!(BinOp::Div.apply(7, -2).unwrap(), -4);
        assert_eq!(BinOp::Div.apply(-7, -2).unwrap(), 3);
        assert_eq!(BinOp::CeilDiv.apply(7, 2).unwrap(), 4);
        assert_eq!(BinOp::CeilDiv.apply(-7, 2).unwrap(), -3);
        assert_eq!(BinOp::CeilDiv.apply(7, -2).unwrap(), -3);
        assert_eq!(BinOp::CeilDiv.apply(8, 2).unwrap(), 4);
        assert!(BinOp::Div.apply(1, 0).is_err());
        assert!(BinOp::Mul.apply(i64::MAX, 2).is_err());
    }

    #[test]
    fn fold_and_rpn() {
        let e = (SymExpr::token() + SymExpr::c(0)) * SymExpr::c(1) + SymExpr::c(2) * SymExpr::c(3);
        assert_eq!(e.fold(), SymExpr::token() + SymExpr::c(6));
        assert_eq!(e.bind(5), SymExpr::c(11));
        let r = e.to_rpn();
        assert_eq!(eval_rpn(&r, 9).unwrap(), 15);
        assert_eq!(SymExpr::from_rpn(&r).unwrap(), e);
        let mut b = Vec::new();
        RpnOp::encode(&r, &mut b);
        assert_eq!(RpnOp::decode(&b).unwrap(), r);
        assert!(RpnOp::decode(&[0, 1]).is_err());
        assert!(eval_rpn(&[RpnOp::Op(BinOp::Add)], 1).is_err());
        assert_eq!(alloc::format!("{}", (SymExpr::token() - SymExpr::c(1)).min(SymExpr::c(4))), "min((token - 1), 4)");
    }
}
