use super::{Func, Node};

/// Symbolic partial derivative with respect to the 0-based variable `k`.
pub(super) fn derivative(node: &Node, k: usize) -> Node {
    match node {
        Node::Const(_) => Node::Const(0.0),
        Node::Var(i) => Node::Const(if *i == k { 1.0 } else { 0.0 }),
        Node::Neg(a) => Node::neg(derivative(a, k)),
        Node::Add(a, b) => Node::add(derivative(a, k), derivative(b, k)),
        Node::Sub(a, b) => Node::sub(derivative(a, k), derivative(b, k)),
        Node::Mul(a, b) => Node::add(
            Node::mul(derivative(a, k), (**b).clone()),
            Node::mul((**a).clone(), derivative(b, k)),
        ),
        Node::Div(a, b) => {
            let da = derivative(a, k);
            let db = derivative(b, k);
            if matches!(db, Node::Const(z) if z == 0.0) {
                return Node::div(da, (**b).clone());
            }
            Node::div(
                Node::sub(
                    Node::mul(da, (**b).clone()),
                    Node::mul((**a).clone(), db),
                ),
                Node::pow((**b).clone(), 2),
            )
        }
        Node::Pow(a, p) => {
            let da = derivative(a, k);
            Node::mul(
                Node::mul(Node::Const(*p as f64), Node::pow((**a).clone(), p - 1)),
                da,
            )
        }
        Node::Call(f, a) => {
            let da = derivative(a, k);
            if matches!(da, Node::Const(z) if z == 0.0) {
                return Node::Const(0.0);
            }
            let u = (**a).clone();
            let outer = match f {
                Func::Sin => Node::call(Func::Cos, u),
                Func::Cos => Node::neg(Node::call(Func::Sin, u)),
                Func::Exp => Node::call(Func::Exp, u),
                Func::Log => return Node::div(da, u),
                Func::Sqrt => {
                    return Node::div(da, Node::mul(Node::Const(2.0), Node::call(Func::Sqrt, u)))
                }
                Func::Abs => Node::call(Func::Sign, u),
                Func::Sign => return Node::Const(0.0),
            };
            Node::mul(outer, da)
        }
    }
}
