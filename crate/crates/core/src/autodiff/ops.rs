use super::kernels::{self, ConvGeom};
use super::{gelu, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Float, Tensor};

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<F: Float> Tape<F> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let v = self.zip_map(a, b, |x, y| if x <= y { x } else { y });
        Ok(self.push(v, Op::Minimum(a, b), &[a, b]))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let v = self.zip_map(a, b, |x, y| if x >= y { x } else { y });
        Ok(self.push(v, Op::Maximum(a, b), &[a, b]))
    }

    fn row_check(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let xs = self.shape(x);
        let rs = self.shape(row);
        if rs.len() != 1 || xs.last() != Some(&rs[0]) {
            return Err(Error::shape(op, xs, rs));
        }
        Ok(())
    }

    /// `x[.., j] + row[j]`
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_check("add_row", x, row)?;
        let r = self.value(row).data();
        let n = r.len();
        let v = Tensor::from_fn(self.shape(x), |i| self.value(x).data()[i] + r[i % n]);
        Ok(self.push(v, Op::AddRow { x, row }, &[x, row]))
    }

    /// `x[.., j] · row[j]`
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_check("mul_row", x, row)?;
        let r = self.value(row).data();
        let n = r.len();
        let v = Tensor::from_fn(self.shape(x), |i| self.value(x).data()[i] * r[i % n]);
        Ok(self.push(v, Op::MulRow { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    pub fn offset(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::Offset(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: F = t.data().iter().copied().sum::<F>() / F::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.abs());
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > F::zero() { e } else { F::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| F::one() / (F::one() + (-e).exp()));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.ln());
        self.push(v, Op::Log(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let v = self.value(x).map(|e| e.max(lo).min(hi));
        self.push(v, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = numel(&shape[..r - 2]);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len()];
        for bi in 0..batch {
            let base = bi * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    data[base + j * rows + i] = src[base + i * cols + j];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.swap(r - 2, r - 1);
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Transpose { x, batch, rows, cols }, &[x]))
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`. A rank-2 operand is
    /// broadcast across the other's batch; otherwise batch extents must match.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k, k2, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
        let (batch, m, a_step, b_step, out_batch) = if bb.is_empty() {
            // fold a's batch into its rows
            (1, numel(ba) * m, 0, 0, ba.to_vec())
        } else if ba.is_empty() {
            (numel(bb), m, 0, k * n, bb.to_vec())
        } else if ba == bb {
            (numel(ba), m, m * k, k * n, ba.to_vec())
        } else {
            return Err(Error::shape("matmul", &sa, &sb));
        };
        let row_m = sa[ra - 2];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![F::zero(); batch * m * n];
        for bi in 0..batch {
            kernels::matmul(
                &av[bi * a_step..bi * a_step + m * k],
                &bv[bi * b_step..bi * b_step + k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut out_shape = out_batch;
        out_shape.extend([row_m, n]);
        let v = Tensor::new(&out_shape, data)?;
        let op = Op::Matmul { a, b, batch, a_step, b_step, m, k, n };
        Ok(self.push(v, op, &[a, b]))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = around_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).fold(F::neg_infinity(), |m, l| m.max(src[idx(l)]));
                let mut total = F::zero();
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    data[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    data[idx(l)] /= total;
                }
            }
        }
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.softmax(x, axis)
    }

    /// Layer norm over the last axis followed by `· gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        if eps <= F::zero() {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        self.row_check("layer_norm", x, gain)?;
        self.row_check("layer_norm", x, bias)?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d;
        let inv_d = F::one() / F::lit(d as f64);
        let mut xhat = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut data = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let v = Tensor::new(&shape, data)?;
        let op = Op::LayerNorm { x, gain, bias, xhat, rstd, dim: d };
        Ok(self.push(v, op, &[x, gain, bias]))
    }

    /// Inference-form batch norm over the leading (channel) axis:
    /// `(x − mean) / √(var + eps) · gain + bias`.
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        mean: Var,
        var: Var,
        gain: Var,
        bias: Var,
        eps: F,
    ) -> Result<Var> {
        if eps <= F::zero() {
            return Err(Error::config("batch_norm eps must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape.first().ok_or_else(|| Error::shape("batch_norm_frozen", &shape, &[]))?;
        for p in [mean, var, gain, bias] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm_frozen", &shape, self.shape(p)));
            }
        }
        let plane = numel(&shape[1..]);
        let (xv, mv, vv) = (self.value(x).data(), self.value(mean).data(), self.value(var).data());
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut data = vec![F::zero(); xv.len()];
        for ch in 0..c {
            let rs = F::one() / (vv[ch] + eps).sqrt();
            for i in ch * plane..(ch + 1) * plane {
                data[i] = (xv[i] - mv[ch]) * rs * gv[ch] + bv[ch];
            }
        }
        let v = Tensor::new(&shape, data)?;
        let op = Op::BatchNorm { x, mean, var, gain, bias, eps, plane };
        Ok(self.push(v, op, &[x, mean, var, gain, bias]))
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: Var,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::shape(op, xs, &[c_out, kh, kw]));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let oh = kernels::conv_out_extent(h, kh, stride, pad);
        let ow = kernels::conv_out_extent(w, kw, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::config(format!(
                "{op}: {h}x{w} input with kernel {kh}x{kw}, stride {stride}, pad {pad} has empty output"
            )));
        };
        Ok(ConvGeom { c_in, h, w, c_out, kh, kw, stride, pad, oh, ow })
    }

    /// Full 2-D convolution of `[Cin, H, W]` with `[Cout, Cin, kh, kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || self.shape(x).first() != Some(&ws[1]) {
            return Err(Error::shape("conv2d", self.shape(x), &ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d bias", self.shape(b), &ws[..1]));
            }
        }
        let geom = self.conv_geom("conv2d", x, ws[0], ws[2], ws[3], stride, pad)?;
        let mut data = vec![F::zero(); geom.c_out * geom.oh * geom.ow];
        kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &mut data,
            &geom,
        );
        let v = Tensor::new(&[geom.c_out, geom.oh, geom.ow], data)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(v, Op::Conv2d { x, w, b: bias, geom }, &parents))
    }

    /// Per-channel convolution of `[C, H, W]` with `[C, kh, kw]`, zero padding.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let ks = self.shape(k).to_vec();
        if ks.len() != 3 || self.shape(x).first() != Some(&ks[0]) {
            return Err(Error::shape("depthwise_conv2d", self.shape(x), &ks));
        }
        let geom = self.conv_geom("depthwise_conv2d", x, ks[0], ks[1], ks[2], stride, pad)?;
        let mut data = vec![F::zero(); geom.c_out * geom.oh * geom.ow];
        kernels::depthwise(self.value(x).data(), self.value(k).data(), &mut data, &geom);
        let v = Tensor::new(&[geom.c_out, geom.oh, geom.ow], data)?;
        Ok(self.push(v, Op::Depthwise { x, k, geom }, &[x, k]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Usage(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = around_axis(&first, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(&shape, data)?;
        let op = Op::Concat { parts: parts.to_vec(), outer, lens, inner };
        Ok(self.push(v, op, parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Usage(format!(
                "slice [{start}, {}) on axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, len_in, inner) = around_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * len_in + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(&out_shape, data)?;
        let op = Op::Slice { x, outer, len_in, start, len, inner };
        Ok(self.push(v, op, &[x]))
    }

    /// `x · w + b` with `w: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Element `index` of the flattened tensor, as a `[1]` tensor.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.slice(flat, 0, index, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::eye(3));
        let a = tape.constant(t(&[3, 3], &[1., -2., 3., 4., 5., 6., -7., 8., 9.]));
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn batched_matmul_broadcasts_rank2() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[3, 2], |i| (i as f64) - 2.0));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 2]);
        for bi in 0..2 {
            let ab = tape.slice(a, 0, bi, 1).unwrap();
            let ab = tape.reshape(ab, &[2, 3]).unwrap();
            let yb = tape.matmul(ab, b).unwrap();
            assert_eq!(tape.value(yb).data(), &tape.value(y).data()[bi * 4..bi * 4 + 4]);
        }
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[3], &[1000., 1000., 1000.]));
        let y = tape.softmax(x, 0).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(t(&[2], &[std::f64::consts::LN_2, 0.]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn depthwise_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 4, 4], |i| i as f64 * 0.5));
        let k = tape.constant(Tensor::ones(&[2, 1, 1]));
        let y = tape.depthwise_conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let c = tape.constant(Tensor::full(&[1, 5, 5], 1.5));
        let k3 = tape.constant(Tensor::ones(&[1, 3, 3]));
        let y = tape.depthwise_conv2d(c, k3, 1, 1).unwrap();
        let v = tape.value(y);
        for i in 1..4 {
            for j in 1..4 {
                assert_eq!(v.data()[i * 5 + j], 13.5);
            }
        }
        assert_eq!(v.data()[0], 6.0);

        let big = tape.constant(Tensor::zeros(&[1, 16, 16]));
        let y = tape.depthwise_conv2d(big, k3, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 8]);
    }

    #[test]
    fn depthwise_empty_output_is_config_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1]));
        let k = tape.constant(Tensor::zeros(&[1, 5, 5]));
        assert!(matches!(tape.depthwise_conv2d(x, k, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 6], 0.1));
        let g = tape.constant(Tensor::ones(&[6]));
        let b = tape.constant(Tensor::zeros(&[6]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));
        assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn gelu_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1]), true);
        let y = tape.gelu(x);
        assert_eq!(tape.value(y).data(), &[0.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.5]);
    }

    #[test]
    fn linear_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0));
        let w = tape.constant(Tensor::eye(4));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn backward_basic_rules() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1., -2., 3.]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1., 1., 1.]);

        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2., -4., 6.]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        // y = x·a + x·b  ⇒  dy/dx = a + b
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[2.0]), true);
        let a = tape.scale(x, 3.0);
        let b = tape.exp(x);
        let y = tape.add(a, b).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!((g.get(x).unwrap()[0] - (3.0 + 2f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn frozen_leaves_receive_nothing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), false);
        let w = tape.leaf(t(&[2], &[3., 4.]), true);
        let y = tape.mul(x, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap(), &[1., 2.]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f32));
        let b = tape.constant(Tensor::from_fn(&[2, 1], |i| 10.0 + i as f32));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[0., 1., 2., 10., 3., 4., 5., 11.]);
        let back = tape.slice(c, 1, 0, 3).unwrap();
        assert_eq!(tape.value(back), tape.value(a));
    }

    #[test]
    fn non_finite_is_reported_by_op_name() {
        let mut tape = Tape::<f64>::new();
        tape.set_check_finite(true);
        let x = tape.constant(t(&[1], &[0.0]));
        let _ = tape.exp(x);
        assert_eq!(tape.first_non_finite(), None);
        let _ = tape.log(x);
        assert_eq!(tape.first_non_finite(), Some("log"));
    }
}
