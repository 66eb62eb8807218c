use std::fmt::Write;

use super::*;

/// Canonical text form. Parsing the output yields a structurally equal module.
pub fn print_module(m: &Module) -> String {
    let mut out = String::new();
    if m.stage == Stage::Lowered {
        out.push_str(".stage lowered\n\n");
    }
    for (i, f) in m.functions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        print_function(&mut out, f);
    }
    out
}

/// Text form of a single function.
pub fn function_text(f: &Function) -> String {
    let mut out = String::new();
    print_function(&mut out, f);
    out
}

pub(crate) fn print_function(out: &mut String, f: &Function) {
    let kw = match f.kind {
        FuncKind::Kernel => "kernel",
        FuncKind::External => "func",
        FuncKind::Internal => "internal func",
    };
    let params: Vec<String> = f
        .params
        .iter()
        .map(|p| {
            let mut s = format!("%{}: {}", f.value_name(p.value), f.value_type(p.value).name());
            if p.uniform {
                s.push_str(" uniform");
            }
            s
        })
        .collect();
    let _ = writeln!(out, "{kw} @{}({}) {{", f.name, params.join(", "));
    for b in &f.blocks {
        let _ = writeln!(out, "{}:", b.label);
        for phi in &b.phis {
            let inc: Vec<String> = phi
                .incoming
                .iter()
                .map(|(p, v)| format!("[%{}, ^{}]", f.value_name(*v), f.label(*p)))
                .collect();
            let _ = writeln!(out, "  %{} = phi {}", f.value_name(phi.dest), inc.join(", "));
        }
        for inst in &b.insts {
            let _ = writeln!(out, "  {}", inst_text(f, inst));
        }
        let _ = writeln!(out, "  {}", term_text(f, &b.term));
    }
    out.push_str("}\n");
}

pub(crate) fn inst_text(f: &Function, inst: &Inst) -> String {
    let n = |v: &Value| format!("%{}", f.value_name(*v));
    let body = match &inst.op {
        Op::Binary(op, a, b) => format!("{} {}, {}", op.mnemonic(), n(a), n(b)),
        Op::Const(c) => format!("const {c}"),
        Op::Icmp(c, a, b) => format!("icmp {} {}, {}", c.mnemonic(), n(a), n(b)),
        Op::Select(c, a, b) | Op::Cmov(c, a, b) => {
            format!("{} {}, {}, {}", inst.op.mnemonic(), n(c), n(a), n(b))
        }
        Op::Special(_) | Op::ActiveMask => inst.op.mnemonic().to_string(),
        Op::Load(p) => format!("load {}", n(p)),
        Op::Store { value, ptr } => format!("store {}, {}", n(value), n(ptr)),
        Op::AddrAdd(p, o) => format!("addr.add {}, {}", n(p), n(o)),
        Op::AtomicAdd { ptr, value } => format!("atomic_add {}, {}", n(ptr), n(value)),
        Op::Vote(k, c) => format!("{} {}", k.mnemonic(), n(c)),
        Op::Shfl { value, lane } => format!("shfl {}, {}", n(value), n(lane)),
        Op::Call { callee, args } => {
            let a: Vec<String> = args.iter().map(n).collect();
            format!("call @{callee}({})", a.join(", "))
        }
        Op::AssumeUniform(v) | Op::Join(v) | Op::Tmc(v) | Op::Mov(v) => {
            format!("{} {}", inst.op.mnemonic(), n(v))
        }
        Op::Barrier { id, warps } => format!("barrier {id}, {warps}"),
        Op::Split { cond, .. } => format!("{} {}", inst.op.mnemonic(), n(cond)),
        Op::Wspawn { count, func } => format!("wspawn {}, @{func}", n(count)),
    };
    match inst.result {
        Some(r) => format!("%{} = {body}", f.value_name(r)),
        None => body,
    }
}

pub(crate) fn term_text(f: &Function, t: &Terminator) -> String {
    let n = |v: &Value| format!("%{}", f.value_name(*v));
    match t {
        Terminator::Br(b) => format!("br ^{}", f.label(*b)),
        Terminator::CondBr {
            cond,
            then_dest,
            else_dest,
        } => format!(
            "br {}, ^{}, ^{}",
            n(cond),
            f.label(*then_dest),
            f.label(*else_dest)
        ),
        Terminator::Ret(None) => "ret".into(),
        Terminator::Ret(Some(v)) => format!("ret {}", n(v)),
        Terminator::Pred {
            cond,
            mask,
            body,
            exit,
        } => format!(
            "pred {}, {}, ^{}, ^{}",
            n(cond),
            n(mask),
            f.label(*body),
            f.label(*exit)
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_canonical_form() {
        let m = parse_module("kernel @k(){ entry: ret }").unwrap();
        assert_eq!(print_module(&m), "kernel @k() {\nentry:\n  ret\n}\n");
    }

    #[test]
    fn split_neg_attribute_prints() {
        let text = ".stage lowered\n\nkernel @k() {\nentry:\n  %t = tid\n  %c = icmp eq %t, %t\n  %tok = split.neg %c\n  br %c, ^a, ^b\na:\n  br ^b\nb:\n  join %tok\n  ret\n}\n";
        let m = parse_module(text).unwrap();
        let printed = print_module(&m);
        assert!(printed.contains("%tok = split.neg %c"));
        assert_eq!(printed, text);
    }
}
