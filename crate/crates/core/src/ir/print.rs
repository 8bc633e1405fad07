//! Deterministic textual dump of a [`KernelProgram`]. The format is documented
//! in `docs/ir-format.md`.

use std::fmt::Write;

use super::{KernelProgram, Op, OpKind};

pub fn print_ir(program: &KernelProgram) -> String {
    let mut out = String::new();
    writeln!(out, "kernel @{} stage \"{}\" {{", program.name, program.stage).unwrap();
    for d in &program.decls {
        let shape: Vec<String> = d.shape.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "  {} = tensor \"{}\" : {} {} [{}] {}",
            d.id,
            d.name,
            d.space,
            d.elem,
            shape.join(", "),
            d.role
        )
        .unwrap();
    }
    for t in &program.tags {
        writeln!(out, "  {} = tag \"{}\"", t.id, t.name).unwrap();
    }
    for t in &program.toggles {
        writeln!(out, "  {} = toggle \"{}\"", t.id, t.name).unwrap();
    }
    print_ops(&mut out, &program.body, 1);
    out.push_str("}\n");
    out
}

fn annotations(op: &Op) -> String {
    if op.annotations.is_empty() {
        String::new()
    } else {
        let a: Vec<&str> = op.annotations.iter().map(String::as_str).collect();
        format!(" {{{}}}", a.join(", "))
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn print_ops(out: &mut String, ops: &[Op], depth: usize) {
    for op in ops {
        print_op(out, op, depth);
    }
}

fn print_op(out: &mut String, op: &Op, depth: usize) {
    let pad = "  ".repeat(depth);
    let ann = annotations(op);
    let block = |out: &mut String, header: String, body: &[Op]| {
        writeln!(out, "{pad}{header} {{").unwrap();
        print_ops(out, body, depth + 1);
        writeln!(out, "{pad}}}{ann}").unwrap();
    };
    match &op.kind {
        OpKind::Generic(g) => {
            let rank = g.rank();
            let maps: Vec<String> = g.maps.iter().map(|m| m.display(rank)).collect();
            writeln!(
                out,
                "{pad}generic {{domain = [{}], iterators = [{}], maps = [{}]}} ins({}) outs({}) {{",
                join(&g.domain),
                join(&g.iterators),
                maps.join(", "),
                join(&g.inputs),
                join(&g.outputs),
            )
            .unwrap();
            for (i, p) in g.payloads.iter().enumerate() {
                match g.reductions.get(i).copied().flatten() {
                    Some(r) => writeln!(out, "{pad}  yield {} = {r} <- {p}", g.outputs[i]).unwrap(),
                    None => writeln!(out, "{pad}  yield {} = {p}", g.outputs[i]).unwrap(),
                }
            }
            writeln!(out, "{pad}}}{ann}").unwrap();
        }
        OpKind::For { var, lb, ub, step, body } => {
            block(out, format!("for {var} = {lb} to {ub} step {step}"), body)
        }
        OpKind::Forall { var, num_threads, body } => {
            block(out, format!("forall {var} in {num_threads} threads"), body)
        }
        OpKind::If { pred, then_body } => block(out, format!("if ({pred})"), then_body),
        OpKind::AsyncExecute { token, body } => block(out, format!("{token} = async_execute"), body),
        OpKind::ExtractSlice { result, source, offsets, sizes } => writeln!(
            out,
            "{pad}{result} = extract_slice {source}[{}] [{}]{ann}",
            join(offsets),
            join(sizes)
        )
        .unwrap(),
        OpKind::Copy { src, dst } => writeln!(out, "{pad}copy {src} -> {dst}{ann}").unwrap(),
        OpKind::Alloc { buf } => writeln!(out, "{pad}alloc {buf}{ann}").unwrap(),
        OpKind::Dealloc { buf } => writeln!(out, "{pad}dealloc {buf}{ann}").unwrap(),
        OpKind::DmaStart { src, dst, tag } => {
            writeln!(out, "{pad}dma_start {src} -> {dst} tag {tag}{ann}").unwrap()
        }
        OpKind::DmaWait { tag } => writeln!(out, "{pad}dma_wait {tag}{ann}").unwrap(),
        OpKind::AsyncGroup { group, size } => {
            writeln!(out, "{pad}{group} = async_group size {size}{ann}").unwrap()
        }
        OpKind::AddToGroup { group, token } => {
            writeln!(out, "{pad}add_to_group {token} -> {group}{ann}").unwrap()
        }
        OpKind::AwaitAll { group } => writeln!(out, "{pad}await_all {group}{ann}").unwrap(),
        OpKind::StoreToggle { cell, value } => {
            writeln!(out, "{pad}store_toggle {cell} = {value}{ann}").unwrap()
        }
        OpKind::LoadToggle { cell, result } => {
            writeln!(out, "{pad}{result} = load_toggle {cell}{ann}").unwrap()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_program_prints_header_and_empty_body() {
        let p = KernelProgram::new("empty");
        assert_eq!(print_ir(&p), "kernel @empty stage \"input\" {\n}\n");
    }
}
