//! Dense matrix alias and named-parameter traversal.

use ndarray::Array2;

pub type Matrix = Array2<f64>;

/// Ordered traversal of named parameter tensors.
///
/// Optimizers, checkpoints and the gradient checker all rely on the order
/// being the same for a model and for its gradient.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn assign(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "parameter count mismatch");
    }
}

pub(crate) fn visit_matrix(
    name: &str,
    m: &Matrix,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(name, m.shape(), m.as_slice().expect("standard layout"));
}

pub(crate) fn visit_matrix_mut(name: &str, m: &mut Matrix, f: &mut dyn FnMut(&str, &mut [f64])) {
    f(name, m.as_slice_mut().expect("standard layout"));
}

/// `y = a x` for a row-major `a` (rows × cols) and `x` of length cols.
pub(crate) fn matvec(a: &Matrix, x: &[f64], y: &mut [f64]) {
    let cols = a.ncols();
    let data = a.as_slice().expect("standard layout");
    for (row, out) in data.chunks_exact(cols).zip(y.iter_mut()) {
        *out = row.iter().zip(x).map(|(w, v)| w * v).sum();
    }
}

/// `x += aᵀ g` for `a` (rows × cols), `g` of length rows.
pub(crate) fn matvec_t_acc(a: &Matrix, g: &[f64], x: &mut [f64]) {
    let cols = a.ncols();
    let data = a.as_slice().expect("standard layout");
    for (row, &gi) in data.chunks_exact(cols).zip(g) {
        if gi == 0.0 {
            continue;
        }
        for (xv, w) in x.iter_mut().zip(row) {
            *xv += gi * w;
        }
    }
}

/// `a += g xᵀ` (outer-product accumulation).
pub(crate) fn outer_acc(a: &mut Matrix, g: &[f64], x: &[f64]) {
    let cols = a.ncols();
    let data = a.as_slice_mut().expect("standard layout");
    for (row, &gi) in data.chunks_exact_mut(cols).zip(g) {
        if gi == 0.0 {
            continue;
        }
        for (w, xv) in row.iter_mut().zip(x) {
            *w += gi * xv;
        }
    }
}

pub(crate) fn visit_vector(
    name: &str,
    v: &ndarray::Array1<f64>,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(name, v.shape(), v.as_slice().expect("standard layout"));
}

pub(crate) fn visit_vector_mut(name: &str, v: &mut ndarray::Array1<f64>, f: &mut dyn FnMut(&str, &mut [f64])) {
    f(name, v.as_slice_mut().expect("standard layout"));
}

/// `dst += src` over two structurally identical parameter sets.
pub fn accumulate<P: Parameters>(dst: &mut P, src: &P) {
    let flat = src.flatten();
    let mut offset = 0;
    dst.visit_mut(&mut |_, v| {
        for (d, s) in v.iter_mut().zip(&flat[offset..]) {
            *d += s;
        }
        offset += v.len();
    });
}
