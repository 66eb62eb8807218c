use std::collections::{HashMap, HashSet};

use thiserror::Error;

use super::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Local(String),
    Global(String),
    Label(String),
    Ident(String),
    Int(i64),
    Punct(char),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            let err = |msg: String| ParseError {
                line: lineno + 1,
                col,
                msg,
            };
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c == '#' || c == ';' {
                break;
            }
            let ident_after = |start: usize| {
                let mut j = start;
                while j < chars.len() && is_ident_char(chars[j]) {
                    j += 1;
                }
                (chars[start..j].iter().collect::<String>(), j)
            };
            let tok = match c {
                '%' | '@' | '^' => {
                    let (name, j) = ident_after(i + 1);
                    if name.is_empty() {
                        return Err(err(format!("expected identifier after '{c}'")));
                    }
                    i = j;
                    match c {
                        '%' => Tok::Local(name),
                        '@' => Tok::Global(name),
                        _ => Tok::Label(name),
                    }
                }
                '(' | ')' | '{' | '}' | ':' | ',' | '[' | ']' | '=' => {
                    i += 1;
                    Tok::Punct(c)
                }
                '-' | '0'..='9' => {
                    let mut j = i + 1;
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    let s: String = chars[i..j].iter().collect();
                    let n: i64 = s
                        .parse()
                        .map_err(|_| err(format!("malformed integer '{s}'")))?;
                    i = j;
                    Tok::Int(n)
                }
                c if is_ident_char(c) => {
                    let (name, j) = ident_after(i);
                    i = j;
                    Tok::Ident(name)
                }
                other => return Err(err(format!("unexpected character '{other}'"))),
            };
            out.push(Token {
                tok,
                line: lineno + 1,
                col,
            });
        }
    }
    let line = text.lines().count() + 1;
    out.push(Token {
        tok: Tok::Eof,
        line,
        col: 1,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

/// A use of a value name, remembered until the whole function is read.
struct PendingUse {
    name: String,
    line: usize,
    col: usize,
    /// Position of the using instruction (block index, inst index); `None`
    /// for phi operands, which may refer forward.
    at: Option<(usize, usize)>,
}

struct FuncCtx {
    func: Function,
    uses: Vec<PendingUse>,
    defs: HashMap<String, (usize, usize)>,
    labels: HashMap<String, BlockId>,
    label_uses: Vec<(String, usize, usize)>,
    mov_only: HashSet<String>,
    cur: (usize, usize),
}

impl FuncCtx {
    fn value(&mut self, name: &str, line: usize, col: usize, in_phi: bool) -> Value {
        self.uses.push(PendingUse {
            name: name.to_string(),
            line,
            col,
            at: if in_phi { None } else { Some(self.cur) },
        });
        match self.func.lookup_value(name) {
            Some(v) => v,
            None => self.func.new_value(name, Type::I32),
        }
    }

    fn block_ref(&mut self, name: &str, line: usize, col: usize) -> BlockId {
        self.label_uses.push((name.to_string(), line, col));
        if let Some(id) = self.labels.get(name) {
            return *id;
        }
        let id = self.func.new_block(name);
        self.labels.insert(name.to_string(), id);
        id
    }
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        let i = (self.pos + k).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn here(&self) -> (usize, usize) {
        let t = &self.toks[self.pos];
        (t.line, t.col)
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        let (line, col) = self.here();
        Err(ParseError {
            line,
            col,
            msg: msg.into(),
        })
    }

    fn expect_punct(&mut self, c: char) -> Result<(), ParseError> {
        if *self.peek() == Tok::Punct(c) {
            self.next();
            Ok(())
        } else {
            self.error(format!("expected '{c}', found {}", describe(self.peek())))
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if *self.peek() == Tok::Punct(c) {
            self.next();
            true
        } else {
            false
        }
    }

    fn expect_ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            other => self.error(format!("expected keyword, found {}", describe(&other))),
        }
    }

    fn expect_global(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Global(s) => {
                self.next();
                Ok(s)
            }
            other => self.error(format!("expected '@name', found {}", describe(&other))),
        }
    }

    fn expect_int(&mut self) -> Result<i64, ParseError> {
        match self.peek().clone() {
            Tok::Int(n) => {
                self.next();
                Ok(n)
            }
            other => self.error(format!("expected integer, found {}", describe(&other))),
        }
    }

    fn operand(&mut self, ctx: &mut FuncCtx, in_phi: bool) -> Result<Value, ParseError> {
        let (line, col) = self.here();
        match self.peek().clone() {
            Tok::Local(name) => {
                self.next();
                Ok(ctx.value(&name, line, col, in_phi))
            }
            other => self.error(format!("expected '%value', found {}", describe(&other))),
        }
    }

    fn label(&mut self, ctx: &mut FuncCtx) -> Result<BlockId, ParseError> {
        let (line, col) = self.here();
        match self.peek().clone() {
            Tok::Label(name) => {
                self.next();
                Ok(ctx.block_ref(&name, line, col))
            }
            other => self.error(format!("expected '^label', found {}", describe(&other))),
        }
    }

    fn module(&mut self) -> Result<Module, ParseError> {
        let mut stage = Stage::High;
        if *self.peek() == Tok::Ident(".stage".into()) {
            self.next();
            stage = match self.expect_ident()?.as_str() {
                "high" => Stage::High,
                "lowered" => Stage::Lowered,
                other => return self.error(format!("unknown stage '{other}'")),
            };
        }
        let mut m = Module::new(stage);
        let mut names = HashSet::new();
        while *self.peek() != Tok::Eof {
            let (line, col) = self.here();
            let f = self.function()?;
            if !names.insert(f.name.clone()) {
                return Err(ParseError {
                    line,
                    col,
                    msg: format!("duplicate function '@{}'", f.name),
                });
            }
            m.functions.push(f);
        }
        if m.functions.is_empty() {
            return self.error("module has no functions");
        }
        Ok(m)
    }

    fn function(&mut self) -> Result<Function, ParseError> {
        let kind = match self.expect_ident()?.as_str() {
            "kernel" => FuncKind::Kernel,
            "func" => FuncKind::External,
            "internal" => {
                if self.expect_ident()? != "func" {
                    return self.error("expected 'func' after 'internal'");
                }
                FuncKind::Internal
            }
            other => return self.error(format!("expected function header, found '{other}'")),
        };
        let name = self.expect_global()?;
        let mut ctx = FuncCtx {
            func: Function::new(name, kind),
            uses: Vec::new(),
            defs: HashMap::new(),
            labels: HashMap::new(),
            label_uses: Vec::new(),
            mov_only: HashSet::new(),
            cur: (0, 0),
        };
        self.expect_punct('(')?;
        if !self.eat_punct(')') {
            loop {
                let (line, col) = self.here();
                let pname = match self.next().tok {
                    Tok::Local(n) => n,
                    other => {
                        return Err(ParseError {
                            line,
                            col,
                            msg: format!("expected parameter, found {}", describe(&other)),
                        })
                    }
                };
                self.expect_punct(':')?;
                let ty = self.ty()?;
                let uniform = if *self.peek() == Tok::Ident("uniform".into()) {
                    self.next();
                    true
                } else {
                    false
                };
                if ctx.defs.contains_key(&pname) {
                    return Err(ParseError {
                        line,
                        col,
                        msg: format!("duplicate parameter '%{pname}'"),
                    });
                }
                let v = ctx.func.new_value(&pname, ty);
                ctx.defs.insert(pname, (0, 0));
                ctx.func.params.push(Param { value: v, uniform });
                if self.eat_punct(')') {
                    break;
                }
                self.expect_punct(',')?;
            }
        }
        self.expect_punct('{')?;
        let mut layout: Vec<BlockId> = Vec::new();
        let mut seen = HashSet::new();
        while !self.eat_punct('}') {
            let (line, col) = self.here();
            let label = match self.next().tok {
                Tok::Ident(s) => s,
                Tok::Int(n) if n >= 0 => n.to_string(),
                other => {
                    return Err(ParseError {
                        line,
                        col,
                        msg: format!("expected block label, found {}", describe(&other)),
                    })
                }
            };
            self.expect_punct(':')?;
            if !seen.insert(label.clone()) {
                return Err(ParseError {
                    line,
                    col,
                    msg: format!("duplicate label '{label}'"),
                });
            }
            let id = match ctx.labels.get(&label) {
                Some(id) => *id,
                None => {
                    let id = ctx.func.new_block(&label);
                    ctx.labels.insert(label.clone(), id);
                    id
                }
            };
            layout.push(id);
            self.block_body(&mut ctx, id, layout.len())?;
        }
        if layout.is_empty() {
            return self.error("function has no blocks");
        }
        for (name, line, col) in &ctx.label_uses {
            if !seen.contains(name) {
                return Err(ParseError {
                    line: *line,
                    col: *col,
                    msg: format!("undefined label '^{name}'"),
                });
            }
        }
        // Blocks were allocated on first mention; restore textual order.
        let pos: HashMap<BlockId, usize> =
            layout.iter().enumerate().map(|(i, b)| (*b, i)).collect();
        ctx.func.blocks.sort_by_key(|b| pos[&b.id]);
        for u in &ctx.uses {
            let ok = match (ctx.defs.get(&u.name), u.at) {
                (None, _) => false,
                (Some(_), None) => true,
                (Some(&(db, di)), Some((ub, ui))) => db != ub || di < ui,
            };
            if !ok {
                return Err(ParseError {
                    line: u.line,
                    col: u.col,
                    msg: format!("undefined value '%{}'", u.name),
                });
            }
        }
        infer_types(&mut ctx.func);
        Ok(ctx.func)
    }

    fn ty(&mut self) -> Result<Type, ParseError> {
        match self.expect_ident()?.as_str() {
            "i32" => Ok(Type::I32),
            "i1" => Ok(Type::I1),
            "addr" => Ok(Type::Addr),
            other => self.error(format!("unknown type '{other}'")),
        }
    }

    fn define(
        &mut self,
        ctx: &mut FuncCtx,
        name: &str,
        line: usize,
        col: usize,
        ty: Type,
        is_mov: bool,
    ) -> Result<Value, ParseError> {
        if ctx.defs.contains_key(name) {
            // Lowered code legitimately reassigns the copies of demoted phis.
            if !(is_mov && ctx.mov_only.contains(name)) {
                return Err(ParseError {
                    line,
                    col,
                    msg: format!("value '%{name}' defined twice"),
                });
            }
        } else {
            ctx.defs.insert(name.to_string(), ctx.cur);
            if is_mov {
                ctx.mov_only.insert(name.to_string());
            }
        }
        let v = match ctx.func.lookup_value(name) {
            Some(v) => v,
            None => ctx.func.new_value(name, ty),
        };
        ctx.func.set_value_type(v, ty);
        Ok(v)
    }

    fn block_body(
        &mut self,
        ctx: &mut FuncCtx,
        id: BlockId,
        block_no: usize,
    ) -> Result<(), ParseError> {
        let mut phis = Vec::new();
        let mut insts = Vec::new();
        let mut index = 0usize;
        loop {
            index += 1;
            ctx.cur = (block_no, index);
            let (line, col) = self.here();
            match self.peek().clone() {
                Tok::Ident(kw) if kw == "br" || kw == "ret" || kw == "pred" => {
                    self.next();
                    let term = self.terminator(ctx, &kw)?;
                    let b = ctx.func.block_mut(id);
                    b.phis = phis;
                    b.insts = insts;
                    b.term = term;
                    return Ok(());
                }
                Tok::Local(dest) => {
                    self.next();
                    self.expect_punct('=')?;
                    let (oline, ocol) = self.here();
                    let opname = self.expect_ident()?;
                    if opname == "phi" {
                        if !insts.is_empty() {
                            return Err(ParseError {
                                line: oline,
                                col: ocol,
                                msg: "phi after non-phi instruction".into(),
                            });
                        }
                        let mut incoming = Vec::new();
                        loop {
                            self.expect_punct('[')?;
                            let v = self.operand(ctx, true)?;
                            self.expect_punct(',')?;
                            let b = self.label(ctx)?;
                            self.expect_punct(']')?;
                            incoming.push((b, v));
                            if !self.eat_punct(',') && *self.peek() != Tok::Punct('[') {
                                break;
                            }
                        }
                        let dv = self.define(ctx, &dest, line, col, Type::I32, false)?;
                        phis.push(Phi { dest: dv, incoming });
                        continue;
                    }
                    let (op, ty) = self.value_op(ctx, &opname, oline, ocol)?;
                    let is_mov = matches!(op, Op::Mov(_));
                    let dv = self.define(ctx, &dest, line, col, ty, is_mov)?;
                    insts.push(Inst::new(Some(dv), op));
                }
                Tok::Ident(kw) => {
                    self.next();
                    let op = self.effect_op(ctx, &kw, line, col)?;
                    insts.push(Inst::new(None, op));
                }
                Tok::Punct('}') | Tok::Eof => {
                    return self.error("block is missing a terminator");
                }
                other => return self.error(format!("unexpected {}", describe(&other))),
            }
        }
    }

    fn value_op(
        &mut self,
        ctx: &mut FuncCtx,
        opname: &str,
        line: usize,
        col: usize,
    ) -> Result<(Op, Type), ParseError> {
        if let Some(op) = BinOp::ALL.iter().find(|o| o.mnemonic() == opname) {
            let a = self.operand(ctx, false)?;
            self.expect_punct(',')?;
            let b = self.operand(ctx, false)?;
            let ty = if ctx.func.value_type(a) == Type::I1 && ctx.func.value_type(b) == Type::I1
            {
                Type::I1
            } else {
                Type::I32
            };
            return Ok((Op::Binary(*op, a, b), ty));
        }
        let op = match opname {
            "const" => {
                let n = self.expect_int()?;
                if n < i32::MIN as i64 || n > u32::MAX as i64 {
                    return self.error(format!("constant {n} out of 32-bit range"));
                }
                return Ok((Op::Const(n as u32 as i32), Type::I32));
            }
            "icmp" => {
                let c = self.expect_ident()?;
                let Some(cmp) = CmpOp::ALL.iter().find(|o| o.mnemonic() == c) else {
                    return self.error(format!("unknown comparison '{c}'"));
                };
                let a = self.operand(ctx, false)?;
                self.expect_punct(',')?;
                let b = self.operand(ctx, false)?;
                return Ok((Op::Icmp(*cmp, a, b), Type::I1));
            }
            "select" | "cmov" => {
                let c = self.operand(ctx, false)?;
                self.expect_punct(',')?;
                let a = self.operand(ctx, false)?;
                self.expect_punct(',')?;
                let b = self.operand(ctx, false)?;
                let ty = ctx.func.value_type(a);
                let op = if opname == "select" {
                    Op::Select(c, a, b)
                } else {
                    Op::Cmov(c, a, b)
                };
                return Ok((op, ty));
            }
            "tid" => Op::Special(SpecialReg::Tid),
            "ntid" => Op::Special(SpecialReg::Ntid),
            "wid" => Op::Special(SpecialReg::Wid),
            "nwid" => Op::Special(SpecialReg::Nwid),
            "coreid" => Op::Special(SpecialReg::CoreId),
            "activemask" => Op::ActiveMask,
            "load" => Op::Load(self.operand(ctx, false)?),
            "addr.add" => {
                let p = self.operand(ctx, false)?;
                self.expect_punct(',')?;
                let o = self.operand(ctx, false)?;
                return Ok((Op::AddrAdd(p, o), Type::Addr));
            }
            "atomic_add" => {
                let ptr = self.operand(ctx, false)?;
                self.expect_punct(',')?;
                let value = self.operand(ctx, false)?;
                Op::AtomicAdd { ptr, value }
            }
            "vote.all" | "vote.any" | "vote.ballot" => {
                let kind = match opname {
                    "vote.all" => VoteKind::All,
                    "vote.any" => VoteKind::Any,
                    _ => VoteKind::Ballot,
                };
                let c = self.operand(ctx, false)?;
                let ty = if kind == VoteKind::Ballot {
                    Type::I32
                } else {
                    Type::I1
                };
                return Ok((Op::Vote(kind, c), ty));
            }
            "shfl" => {
                let value = self.operand(ctx, false)?;
                self.expect_punct(',')?;
                let lane = self.operand(ctx, false)?;
                let ty = ctx.func.value_type(value);
                return Ok((Op::Shfl { value, lane }, ty));
            }
            "call" => self.call(ctx)?,
            "split" | "split.neg" => Op::Split {
                cond: self.operand(ctx, false)?,
                negate: opname == "split.neg",
            },
            "mov" => {
                let v = self.operand(ctx, false)?;
                let ty = ctx.func.value_type(v);
                return Ok((Op::Mov(v), ty));
            }
            other => {
                return Err(ParseError {
                    line,
                    col,
                    msg: format!("unknown opcode '{other}'"),
                })
            }
        };
        Ok((op, Type::I32))
    }

    fn call(&mut self, ctx: &mut FuncCtx) -> Result<Op, ParseError> {
        let callee = self.expect_global()?;
        self.expect_punct('(')?;
        let mut args = Vec::new();
        if !self.eat_punct(')') {
            loop {
                args.push(self.operand(ctx, false)?);
                if self.eat_punct(')') {
                    break;
                }
                self.expect_punct(',')?;
            }
        }
        Ok(Op::Call { callee, args })
    }

    fn effect_op(
        &mut self,
        ctx: &mut FuncCtx,
        kw: &str,
        line: usize,
        col: usize,
    ) -> Result<Op, ParseError> {
        Ok(match kw {
            "store" => {
                let value = self.operand(ctx, false)?;
                self.expect_punct(',')?;
                let ptr = self.operand(ctx, false)?;
                Op::Store { value, ptr }
            }
            "call" => self.call(ctx)?,
            "assume_uniform" => Op::AssumeUniform(self.operand(ctx, false)?),
            "barrier" => {
                let id = self.expect_int()?;
                self.expect_punct(',')?;
                let warps = self.expect_int()?;
                if id < 0 || warps < 0 || id > u32::MAX as i64 || warps > u32::MAX as i64 {
                    return self.error("barrier operands must be non-negative");
                }
                Op::Barrier {
                    id: id as u32,
                    warps: warps as u32,
                }
            }
            "join" => Op::Join(self.operand(ctx, false)?),
            "tmc" => Op::Tmc(self.operand(ctx, false)?),
            "wspawn" => {
                let count = self.operand(ctx, false)?;
                self.expect_punct(',')?;
                let func = self.expect_global()?;
                Op::Wspawn { count, func }
            }
            other => {
                return Err(ParseError {
                    line,
                    col,
                    msg: format!("unknown opcode '{other}'"),
                })
            }
        })
    }

    fn terminator(&mut self, ctx: &mut FuncCtx, kw: &str) -> Result<Terminator, ParseError> {
        match kw {
            "br" => match self.peek() {
                Tok::Label(_) => Ok(Terminator::Br(self.label(ctx)?)),
                _ => {
                    let cond = self.operand(ctx, false)?;
                    self.expect_punct(',')?;
                    let then_dest = self.label(ctx)?;
                    self.expect_punct(',')?;
                    let else_dest = self.label(ctx)?;
                    Ok(Terminator::CondBr {
                        cond,
                        then_dest,
                        else_dest,
                    })
                }
            },
            "ret" => {
                // `ret %v` versus a bare `ret` followed by the next block.
                if matches!(self.peek(), Tok::Local(_))
                    && *self.peek_at(1) != Tok::Punct('=')
                {
                    Ok(Terminator::Ret(Some(self.operand(ctx, false)?)))
                } else {
                    Ok(Terminator::Ret(None))
                }
            }
            _ => {
                let cond = self.operand(ctx, false)?;
                self.expect_punct(',')?;
                let mask = self.operand(ctx, false)?;
                self.expect_punct(',')?;
                let body = self.label(ctx)?;
                self.expect_punct(',')?;
                let exit = self.label(ctx)?;
                Ok(Terminator::Pred {
                    cond,
                    mask,
                    body,
                    exit,
                })
            }
        }
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Local(s) => format!("'%{s}'"),
        Tok::Global(s) => format!("'@{s}'"),
        Tok::Label(s) => format!("'^{s}'"),
        Tok::Ident(s) => format!("'{s}'"),
        Tok::Int(n) => format!("'{n}'"),
        Tok::Punct(c) => format!("'{c}'"),
        Tok::Eof => "end of input".into(),
    }
}

/// Parse a module from `.vir` text.
pub fn parse_module(text: &str) -> Result<Module, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, pos: 0 };
    p.module()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_kernel() {
        let m = parse_module("kernel @k(){ entry: ret }").unwrap();
        assert_eq!(m.functions.len(), 1);
        assert_eq!(m.functions[0].blocks.len(), 1);
        assert_eq!(m.stage, Stage::High);
    }

    #[test]
    fn self_use_is_undefined() {
        let err = parse_module("kernel @k() {\nentry:\n  %x = add %x, %x\n  ret\n}\n").unwrap_err();
        assert!(err.msg.contains("undefined value '%x'"), "{err}");
        assert_eq!(err.line, 3);
    }

    #[test]
    fn unknown_opcode_and_duplicate_label() {
        let e = parse_module("kernel @k() {\nentry:\n  %x = frob %y\n  ret\n}").unwrap_err();
        assert!(e.msg.contains("unknown opcode"));
        let e = parse_module("kernel @k() {\na:\n  br ^a\na:\n  ret\n}").unwrap_err();
        assert!(e.msg.contains("duplicate label"));
    }

    #[test]
    fn forward_phi_reference_and_lowered_ops() {
        let text = "
.stage lowered
kernel @k(%n: i32 uniform) {
entry:
  %t = tid
  %c = icmp slt %t, %n
  %tok = split.neg %c
  br %c, ^a, ^b
a:
  %x = mov %t
  br ^b
b:
  join %tok
  ret
}";
        let m = parse_module(text).unwrap();
        assert_eq!(m.stage, Stage::Lowered);
        let f = &m.functions[0];
        assert!(f.params[0].uniform);
        assert!(matches!(
            f.blocks[0].insts[2].op,
            Op::Split { negate: true, .. }
        ));
    }

    #[test]
    fn missing_terminator_reports_position() {
        let e = parse_module("kernel @k() {\nentry:\n  %a = const 1\n}").unwrap_err();
        assert_eq!(e.line, 4);
    }
}
