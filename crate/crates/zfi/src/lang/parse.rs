//! Line-oriented assembly parser.
//!
//! Grammar, per line (with `#` comments):
//!
//! ```text
//! line    ::= prefix* (directive | insn)?
//! prefix  ::= (<number> | <label>) ':'
//! directive ::= '.entry' target | '.table' target (',' target)*
//! insn    ::= reg ':=' expr
//!           | reg ':=' '[' reg '+' expr ']'
//!           | '[' reg '+' expr ']' ':=' expr
//!           | 'jmp' (sdisp | label)  [ 'if' expr ]
//!           | 'jmp' reg
//!           | 'call' (sdisp | label) | 'call' reg
//!           | 'ret' | 'flush' | 'endbranch'
//! ```
//!
//! Addresses are consecutive from the current cursor; a `<number>:`
//! prefix moves the cursor, and labels bind to it (including one past
//! the final instruction). Labels in jump position resolve to relative
//! displacements at parse time.

use std::collections::BTreeMap;

use super::{BinOp, Expr, Instruction, Program, Register, Value};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("parse error at line {line}, column {col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

impl ParseError {
    fn new(line: usize, col: usize, msg: impl Into<String>) -> Self {
        ParseError {
            line,
            col,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(u32),
    Directive(String),
    Assign, // :=
    Colon,
    LBracket,
    RBracket,
    LParen,
    RParen,
    Plus,
    Minus,
    Star,
    Amp,
    Pipe,
    Caret,
    Shl,
    Shr,
    Lt,
    Ge,
    EqEq,
    Ne,
    Comma,
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<(Tok, usize)>, ParseError> {
    let mut toks = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let col = i + 1;
        match c {
            '#' => break,
            c if c.is_whitespace() => i += 1,
            '[' => {
                toks.push((Tok::LBracket, col));
                i += 1;
            }
            ']' => {
                toks.push((Tok::RBracket, col));
                i += 1;
            }
            '(' => {
                toks.push((Tok::LParen, col));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, col));
                i += 1;
            }
            ',' => {
                toks.push((Tok::Comma, col));
                i += 1;
            }
            '+' => {
                toks.push((Tok::Plus, col));
                i += 1;
            }
            '-' => {
                toks.push((Tok::Minus, col));
                i += 1;
            }
            '*' => {
                toks.push((Tok::Star, col));
                i += 1;
            }
            '&' => {
                toks.push((Tok::Amp, col));
                i += 1;
            }
            '|' => {
                toks.push((Tok::Pipe, col));
                i += 1;
            }
            '^' => {
                toks.push((Tok::Caret, col));
                i += 1;
            }
            ':' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    toks.push((Tok::Assign, col));
                    i += 2;
                } else {
                    toks.push((Tok::Colon, col));
                    i += 1;
                }
            }
            '<' => {
                if bytes.get(i + 1) == Some(&b'<') {
                    toks.push((Tok::Shl, col));
                    i += 2;
                } else {
                    toks.push((Tok::Lt, col));
                    i += 1;
                }
            }
            '>' => {
                if bytes.get(i + 1) == Some(&b'>') {
                    toks.push((Tok::Shr, col));
                    i += 2;
                } else if bytes.get(i + 1) == Some(&b'=') {
                    toks.push((Tok::Ge, col));
                    i += 2;
                } else {
                    return Err(ParseError::new(lineno, col, "expected '>>' or '>='"));
                }
            }
            '=' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    toks.push((Tok::EqEq, col));
                    i += 2;
                } else {
                    return Err(ParseError::new(lineno, col, "expected '=='"));
                }
            }
            '!' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    toks.push((Tok::Ne, col));
                    i += 2;
                } else {
                    return Err(ParseError::new(lineno, col, "expected '!='"));
                }
            }
            '.' => {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && (bytes[j] as char).is_ascii_alphanumeric() {
                    j += 1;
                }
                if j == start {
                    return Err(ParseError::new(
                        lineno,
                        col,
                        "expected directive name after '.'",
                    ));
                }
                toks.push((Tok::Directive(line[start..j].to_string()), col));
                i = j;
            }
            '0'..='9' => {
                let (v, j) = take_number(line, i, lineno)?;
                toks.push((Tok::Num(v), col));
                i = j;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i;
                while j < bytes.len() {
                    let ch = bytes[j] as char;
                    if ch.is_ascii_alphanumeric() || ch == '_' {
                        j += 1;
                    } else {
                        break;
                    }
                }
                toks.push((Tok::Ident(line[i..j].to_string()), col));
                i = j;
            }
            other => {
                return Err(ParseError::new(
                    lineno,
                    col,
                    format!("unexpected character '{other}'"),
                ));
            }
        }
    }
    Ok(toks)
}

fn take_number(line: &str, start: usize, lineno: usize) -> Result<(u32, usize), ParseError> {
    let bytes = line.as_bytes();
    let (radix, digits_start) =
        if line[start..].starts_with("0x") || line[start..].starts_with("0X") {
            (16, start + 2)
        } else {
            (10, start)
        };
    let mut j = digits_start;
    while j < bytes.len() && (bytes[j] as char).is_digit(radix) {
        j += 1;
    }
    if j == digits_start {
        return Err(ParseError::new(lineno, start + 1, "expected digits"));
    }
    u32::from_str_radix(&line[digits_start..j], radix)
        .map(|v| (v, j))
        .map_err(|_| ParseError::new(lineno, start + 1, "numeric literal out of range"))
}

/// Jump/call target before label resolution.
#[derive(Debug, Clone)]
enum Target {
    Disp(i32),
    Label(String, usize),
}

/// Instruction with possibly unresolved direct targets.
#[derive(Debug, Clone)]
enum Pending {
    Ready(Instruction),
    Jump { target: Target, cond: Option<Expr> },
    Call { target: Target },
}

struct LineParser<'a> {
    toks: &'a [(Tok, usize)],
    pos: usize,
    line: usize,
}

impl<'a> LineParser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map_or(1, |(_, c)| *c)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError::new(self.line, self.col(), msg)
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        match self.next() {
            Some(t) if t == tok => Ok(()),
            _ => Err(ParseError::new(
                self.line,
                self.col(),
                format!("expected {what}"),
            )),
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn register(&mut self, name: &str) -> Result<Register, ParseError> {
        Register::from_name(name).ok_or_else(|| self.err(format!("unknown register name '{name}'")))
    }

    /// Memory operand after the opening bracket: `reg + expr ]`.
    fn mem_operand(&mut self) -> Result<(Register, Expr), ParseError> {
        let base = match self.next() {
            Some(Tok::Ident(name)) => self.register(&name)?,
            _ => return Err(self.err("expected base register")),
        };
        self.expect(Tok::Plus, "'+' after base register")?;
        let off = self.expr(0)?;
        self.expect(Tok::RBracket, "']'")?;
        Ok((base, off))
    }

    fn binop_of(tok: &Tok) -> Option<BinOp> {
        match tok {
            Tok::Pipe => Some(BinOp::Or),
            Tok::Caret => Some(BinOp::Xor),
            Tok::Amp => Some(BinOp::And),
            Tok::Ident(s) if s == "mask" => Some(BinOp::Mask),
            Tok::EqEq => Some(BinOp::Eq),
            Tok::Ne => Some(BinOp::Ne),
            Tok::Lt => Some(BinOp::Lt),
            Tok::Ge => Some(BinOp::Ge),
            Tok::Shl => Some(BinOp::Shl),
            Tok::Shr => Some(BinOp::Shr),
            Tok::Plus => Some(BinOp::Add),
            Tok::Minus => Some(BinOp::Sub),
            Tok::Star => Some(BinOp::Mul),
            _ => None,
        }
    }

    fn expr(&mut self, min_prec: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.primary()?;
        while let Some(tok) = self.peek() {
            let Some(op) = Self::binop_of(tok) else { break };
            let prec = precedence(op);
            if prec < min_prec {
                break;
            }
            self.next();
            let rhs = self.expr(prec + 1)?;
            lhs = Expr::bin(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Lit(Value(v))),
            Some(Tok::Ident(name)) => Ok(Expr::Reg(self.register(&name)?)),
            Some(Tok::LParen) => {
                let e = self.expr(0)?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            _ => Err(self.err("expected literal, register, or '('")),
        }
    }

    /// Direct target: `+i`, `-i`, or a label.
    fn target(&mut self) -> Result<Target, ParseError> {
        let col = self.col();
        match self.next() {
            Some(Tok::Plus) => match self.next() {
                Some(Tok::Num(v)) => Ok(Target::Disp(v as i32)),
                _ => Err(self.err("expected number after '+'")),
            },
            Some(Tok::Minus) => match self.next() {
                Some(Tok::Num(v)) => Ok(Target::Disp(-(v as i32))),
                _ => Err(self.err("expected number after '-'")),
            },
            Some(Tok::Ident(name)) => Ok(Target::Label(name, col)),
            _ => Err(self.err("expected '+i', '-i', or label")),
        }
    }

    fn instruction(&mut self) -> Result<Pending, ParseError> {
        match self.next() {
            Some(Tok::Ident(word)) => match word.as_str() {
                "jmp" => {
                    // Indirect if the operand is a register name.
                    if let Some(Tok::Ident(name)) = self.peek() {
                        if let Some(reg) = Register::from_name(name) {
                            self.next();
                            return Ok(Pending::Ready(Instruction::JumpInd { reg }));
                        }
                    }
                    let target = self.target()?;
                    let cond = if let Some(Tok::Ident(w)) = self.peek() {
                        if w == "if" {
                            self.next();
                            Some(self.expr(0)?)
                        } else {
                            None
                        }
                    } else {
                        None
                    };
                    Ok(Pending::Jump { target, cond })
                }
                "call" => {
                    if let Some(Tok::Ident(name)) = self.peek() {
                        if let Some(reg) = Register::from_name(name) {
                            self.next();
                            return Ok(Pending::Ready(Instruction::CallInd { reg }));
                        }
                    }
                    let target = self.target()?;
                    Ok(Pending::Call { target })
                }
                "ret" => Ok(Pending::Ready(Instruction::Ret)),
                "flush" => Ok(Pending::Ready(Instruction::Flush)),
                "endbranch" => Ok(Pending::Ready(Instruction::EndBranch)),
                name => {
                    let dst = self.register(name)?;
                    self.expect(Tok::Assign, "':='")?;
                    if self.peek() == Some(&Tok::LBracket) {
                        self.next();
                        let (base, offset) = self.mem_operand()?;
                        Ok(Pending::Ready(Instruction::Load { dst, base, offset }))
                    } else {
                        let expr = self.expr(0)?;
                        Ok(Pending::Ready(Instruction::Assign { dst, expr }))
                    }
                }
            },
            Some(Tok::LBracket) => {
                let (base, offset) = self.mem_operand()?;
                self.expect(Tok::Assign, "':='")?;
                let value = self.expr(0)?;
                Ok(Pending::Ready(Instruction::Store {
                    base,
                    offset,
                    value,
                }))
            }
            _ => Err(self.err("expected instruction")),
        }
    }
}

pub(super) fn precedence(op: BinOp) -> u8 {
    match op {
        BinOp::Or => 0,
        BinOp::Xor => 1,
        BinOp::And | BinOp::Mask => 2,
        BinOp::Eq | BinOp::Ne => 3,
        BinOp::Lt | BinOp::Ge => 4,
        BinOp::Shl | BinOp::Shr => 5,
        BinOp::Add | BinOp::Sub => 6,
        BinOp::Mul => 7,
    }
}

/// Parse assembly text into a [`Program`].
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut labels: BTreeMap<String, u32> = BTreeMap::new();
    let mut pending: Vec<(u32, usize, Pending)> = Vec::new();
    let mut table_ops: Vec<(Target, usize)> = Vec::new();
    let mut entry_op: Option<(Target, usize)> = None;
    let mut cursor: u32 = 0;
    let mut first_addr: Option<u32> = None;
    let mut used: BTreeMap<u32, usize> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let toks = tokenize(raw, lineno)?;
        if toks.is_empty() {
            continue;
        }
        let mut lp = LineParser {
            toks: &toks,
            pos: 0,
            line: lineno,
        };

        // Leading `<number>:` and `<label>:` prefixes.
        loop {
            let is_prefix = matches!(
                (lp.peek(), lp.toks.get(lp.pos + 1).map(|(t, _)| t)),
                (Some(Tok::Num(_)), Some(Tok::Colon)) | (Some(Tok::Ident(_)), Some(Tok::Colon))
            );
            if !is_prefix {
                break;
            }
            let col = lp.col();
            match lp.next() {
                Some(Tok::Num(addr)) => cursor = addr,
                Some(Tok::Ident(name)) => {
                    if Register::from_name(&name).is_some() {
                        return Err(ParseError::new(
                            lineno,
                            col,
                            format!("label '{name}' collides with a register name"),
                        ));
                    }
                    if labels.insert(name.clone(), cursor).is_some() {
                        return Err(ParseError::new(
                            lineno,
                            col,
                            format!("duplicate label '{name}'"),
                        ));
                    }
                }
                _ => unreachable!(),
            }
            lp.next(); // colon
        }

        if lp.at_end() {
            continue;
        }

        if let Some(Tok::Directive(name)) = lp.peek().cloned() {
            lp.next();
            match name.as_str() {
                "table" => loop {
                    let col = lp.col();
                    table_ops.push((lp.target()?, col));
                    if lp.peek() == Some(&Tok::Comma) {
                        lp.next();
                    } else {
                        break;
                    }
                },
                "entry" => {
                    let col = lp.col();
                    entry_op = Some((lp.target()?, col));
                }
                other => return Err(lp.err(format!("unknown directive '.{other}'"))),
            }
            if !lp.at_end() {
                return Err(lp.err("trailing tokens after directive"));
            }
            continue;
        }

        let insn = lp.instruction()?;
        if !lp.at_end() {
            return Err(lp.err("trailing tokens after instruction"));
        }
        if let Some(prev_line) = used.insert(cursor, lineno) {
            return Err(ParseError::new(
                lineno,
                1,
                format!("duplicate address {cursor} (already used on line {prev_line})"),
            ));
        }
        first_addr.get_or_insert(cursor);
        pending.push((cursor, lineno, insn));
        cursor += 1;
    }

    let resolve_abs = |t: &Target, line: usize| -> Result<u32, ParseError> {
        match t {
            Target::Disp(d) if *d >= 0 => Ok(*d as u32),
            Target::Disp(_) => Err(ParseError::new(line, 1, "negative absolute address")),
            Target::Label(name, col) => labels
                .get(name)
                .copied()
                .ok_or_else(|| ParseError::new(line, *col, format!("undefined label '{name}'"))),
        }
    };

    let mut program = Program::new(0);
    for (addr, line, p) in &pending {
        let resolve_rel = |t: &Target| -> Result<i32, ParseError> {
            match t {
                Target::Disp(d) => Ok(*d),
                Target::Label(name, col) => {
                    let dest = labels.get(name).copied().ok_or_else(|| {
                        ParseError::new(*line, *col, format!("undefined label '{name}'"))
                    })?;
                    Ok(dest as i64 as i32 - *addr as i32)
                }
            }
        };
        let insn = match p {
            Pending::Ready(i) => i.clone(),
            Pending::Jump { target, cond } => {
                let disp = resolve_rel(target)?;
                match cond {
                    Some(c) => Instruction::JumpIf {
                        disp,
                        cond: c.clone(),
                    },
                    None => Instruction::Jump { disp },
                }
            }
            Pending::Call { target } => Instruction::Call {
                disp: resolve_rel(target)?,
            },
        };
        program.insert(*addr, insn);
    }

    let mut table = Vec::new();
    for (t, _col) in &table_ops {
        table.push(resolve_abs(t, 0)?);
    }
    program.set_table(table);

    let entry = match &entry_op {
        Some((t, _)) => resolve_abs(t, 0)?,
        None => first_addr.unwrap_or(0),
    };
    program.set_entry(entry);
    Ok(program)
}
