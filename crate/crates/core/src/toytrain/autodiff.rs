//! Minimal reverse-mode automatic differentiation over f32 tensors.
//!
//! A [`Tape`] records the forward graph; [`Tape::backward`] walks it in
//! reverse, accumulating gradients into every node. Ops cover what the
//! segmentation trunk needs: 3D convolution (stride 1, same padding),
//! leaky ReLU, 2x2x1 average pooling, nearest-neighbour upsampling, and
//! channel concatenation. Loss gradients are seeded from outside the tape.
//!
//! All loops run in a fixed order with no threading, so gradients are
//! bit-reproducible.

/// Dense f32 tensor with an explicit shape (row-major, last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { data: vec![0.0; len], shape: shape.to_vec() }
    }

    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "shape/data mismatch");
        Self { data, shape: shape.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Shape as [C, X, Y, Z]; panics when the tensor is not 4D.
    pub fn dim4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected 4D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

impl VarId {
    /// Position in the gradient vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv3 { input: VarId, weight: VarId, bias: VarId },
    LeakyRelu { input: VarId, slope: f32 },
    AvgPoolXy { input: VarId },
    UpsampleXy { input: VarId },
    Concat { a: VarId, b: VarId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Forward graph recorder.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// 3D convolution, stride 1, zero padding to keep the spatial shape.
    /// `weight` is [Cout, Cin, KX, KY, KZ] with odd kernel extents;
    /// `bias` is [Cout].
    pub fn conv3(&mut self, input: VarId, weight: VarId, bias: VarId) -> VarId {
        let out = conv3_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
        );
        self.push(out, Op::Conv3 { input, weight, bias })
    }

    pub fn leaky_relu(&mut self, input: VarId, slope: f32) -> VarId {
        let src = self.value(input);
        let data = src.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let t = Tensor { data, shape: src.shape.clone() };
        self.push(t, Op::LeakyRelu { input, slope })
    }

    /// 2x2x1 average pooling over x and y; requires even x/y extents.
    pub fn avg_pool_xy(&mut self, input: VarId) -> VarId {
        let src = self.value(input);
        let (c, x, y, z) = src.dim4();
        assert!(x % 2 == 0 && y % 2 == 0, "pooling needs even x/y, got {x}x{y}");
        let (ox, oy) = (x / 2, y / 2);
        let mut out = Tensor::zeros(&[c, ox, oy, z]);
        for ch in 0..c {
            for px in 0..ox {
                for py in 0..oy {
                    for pz in 0..z {
                        let mut acc = 0.0;
                        for dx in 0..2 {
                            for dy in 0..2 {
                                acc += src.data
                                    [idx4(src, ch, 2 * px + dx, 2 * py + dy, pz)];
                            }
                        }
                        let oi = idx4_dims(&[c, ox, oy, z], ch, px, py, pz);
                        out.data[oi] = acc / 4.0;
                    }
                }
            }
        }
        self.push(out, Op::AvgPoolXy { input })
    }

    /// Nearest-neighbour 2x upsampling over x and y.
    pub fn upsample_xy(&mut self, input: VarId) -> VarId {
        let src = self.value(input);
        let (c, x, y, z) = src.dim4();
        let mut out = Tensor::zeros(&[c, 2 * x, 2 * y, z]);
        for ch in 0..c {
            for px in 0..2 * x {
                for py in 0..2 * y {
                    for pz in 0..z {
                        let oi = idx4_dims(&[c, 2 * x, 2 * y, z], ch, px, py, pz);
                        out.data[oi] = src.data[idx4(src, ch, px / 2, py / 2, pz)];
                    }
                }
            }
        }
        self.push(out, Op::UpsampleXy { input })
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: VarId, b: VarId) -> VarId {
        let ta = self.value(a);
        let tb = self.value(b);
        let (ca, x, y, z) = ta.dim4();
        let (cb, xb, yb, zb) = tb.dim4();
        assert_eq!((x, y, z), (xb, yb, zb), "concat spatial shapes differ");
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(&ta.data);
        data.extend_from_slice(&tb.data);
        let t = Tensor { data, shape: vec![ca + cb, x, y, z] };
        self.push(t, Op::Concat { a, b })
    }

    /// Reverse pass. `seeds` supplies dL/d(node) for the output nodes; the
    /// return value holds accumulated gradients for every node id.
    pub fn backward(&self, seeds: &[(VarId, Tensor)]) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            debug_assert_eq!(seed.shape, self.nodes[id.0].value.shape);
            accumulate(&mut grads[id.0], seed);
        }
        for i in (0..self.nodes.len()).rev() {
            let grad_out = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv3 { input, weight, bias } => {
                    let (gin, gw, gb) = conv3_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        &grad_out,
                    );
                    accumulate(&mut grads[input.0], &gin);
                    accumulate(&mut grads[weight.0], &gw);
                    accumulate(&mut grads[bias.0], &gb);
                }
                Op::LeakyRelu { input, slope } => {
                    let src = &self.nodes[input.0].value;
                    let mut g = Tensor::zeros(&src.shape);
                    for ((gd, &go), &v) in
                        g.data.iter_mut().zip(grad_out.data.iter()).zip(src.data.iter())
                    {
                        *gd = if v > 0.0 { go } else { slope * go };
                    }
                    accumulate(&mut grads[input.0], &g);
                }
                Op::AvgPoolXy { input } => {
                    let src = &self.nodes[input.0].value;
                    let (c, x, y, z) = src.dim4();
                    let mut g = Tensor::zeros(&src.shape);
                    for ch in 0..c {
                        for px in 0..x / 2 {
                            for py in 0..y / 2 {
                                for pz in 0..z {
                                    let share = grad_out.data
                                        [idx4_dims(&[c, x / 2, y / 2, z], ch, px, py, pz)]
                                        / 4.0;
                                    for dx in 0..2 {
                                        for dy in 0..2 {
                                            g.data[idx4(src, ch, 2 * px + dx, 2 * py + dy, pz)] +=
                                                share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], &g);
                }
                Op::UpsampleXy { input } => {
                    let src = &self.nodes[input.0].value;
                    let (c, x, y, z) = src.dim4();
                    let mut g = Tensor::zeros(&src.shape);
                    for ch in 0..c {
                        for px in 0..2 * x {
                            for py in 0..2 * y {
                                for pz in 0..z {
                                    g.data[idx4(src, ch, px / 2, py / 2, pz)] += grad_out.data
                                        [idx4_dims(&[c, 2 * x, 2 * y, z], ch, px, py, pz)];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], &g);
                }
                Op::Concat { a, b } => {
                    let split = self.nodes[a.0].value.len();
                    let ga = Tensor {
                        data: grad_out.data[..split].to_vec(),
                        shape: self.nodes[a.0].value.shape.clone(),
                    };
                    let gb = Tensor {
                        data: grad_out.data[split..].to_vec(),
                        shape: self.nodes[b.0].value.shape.clone(),
                    };
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
            }
        }
        grads
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data.iter_mut().zip(g.data.iter()) {
                *a += b;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

#[inline]
fn idx4(t: &Tensor, c: usize, x: usize, y: usize, z: usize) -> usize {
    idx4_dims(&t.shape, c, x, y, z)
}

#[inline]
fn idx4_dims(shape: &[usize], c: usize, x: usize, y: usize, z: usize) -> usize {
    ((c * shape[1] + x) * shape[2] + y) * shape[3] + z
}

fn conv3_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (cin, x, y, z) = input.dim4();
    assert_eq!(weight.shape.len(), 5, "conv weight must be 5D");
    let (cout, wcin, kx, ky, kz) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
        weight.shape[4],
    );
    assert_eq!(cin, wcin, "conv channel mismatch");
    assert_eq!(bias.shape, vec![cout]);
    assert!(kx % 2 == 1 && ky % 2 == 1 && kz % 2 == 1, "kernel extents must be odd");
    let (px, py, pz) = (kx / 2, ky / 2, kz / 2);
    let mut out = Tensor::zeros(&[cout, x, y, z]);

    for co in 0..cout {
        let b = bias.data[co];
        let out_ch = &mut out.data[co * x * y * z..(co + 1) * x * y * z];
        out_ch.fill(b);
        for ci in 0..cin {
            let in_ch = &input.data[ci * x * y * z..(ci + 1) * x * y * z];
            for ox in 0..kx {
                let dx = ox as isize - px as isize;
                let (x0, x1) = valid_range(dx, x);
                for oy in 0..ky {
                    let dy = oy as isize - py as isize;
                    let (y0, y1) = valid_range(dy, y);
                    for oz in 0..kz {
                        let dz = oz as isize - pz as isize;
                        let (z0, z1) = valid_range(dz, z);
                        if x0 >= x1 || y0 >= y1 || z0 >= z1 {
                            continue;
                        }
                        let w = weight.data
                            [(((co * cin + ci) * kx + ox) * ky + oy) * kz + oz];
                        if dz == 0 && z0 == 0 && z1 == z {
                            // full z extent: y and z fuse into one
                            // contiguous run per x row
                            let run = (y1 - y0) * z;
                            for vx in x0..x1 {
                                let sx = (vx as isize + dx) as usize;
                                let sy = (y0 as isize + dy) as usize;
                                let ob = (vx * y + y0) * z;
                                let ib = (sx * y + sy) * z;
                                let dst = &mut out_ch[ob..ob + run];
                                let src = &in_ch[ib..ib + run];
                                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                                    *d += w * s;
                                }
                            }
                        } else {
                            for vx in x0..x1 {
                                let sx = (vx as isize + dx) as usize;
                                for vy in y0..y1 {
                                    let sy = (vy as isize + dy) as usize;
                                    let ob = (vx * y + vy) * z;
                                    let ib = (sx * y + sy) * z;
                                    let src_off = (z0 as isize + dz) as usize;
                                    let dst = &mut out_ch[ob + z0..ob + z1];
                                    let src = &in_ch[ib + src_off..ib + src_off + (z1 - z0)];
                                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                                        *d += w * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (cin, x, y, z) = input.dim4();
    let (cout, _, kx, ky, kz) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
        weight.shape[4],
    );
    let (px, py, pz) = (kx / 2, ky / 2, kz / 2);
    let mut gin = Tensor::zeros(&input.shape);
    let mut gw = Tensor::zeros(&weight.shape);
    let mut gb = Tensor::zeros(&[cout]);

    for co in 0..cout {
        let go_ch = &grad_out.data[co * x * y * z..(co + 1) * x * y * z];
        gb.data[co] = go_ch.iter().sum();
        for ci in 0..cin {
            let in_ch = &input.data[ci * x * y * z..(ci + 1) * x * y * z];
            let gin_ch = &mut gin.data[ci * x * y * z..(ci + 1) * x * y * z];
            for ox in 0..kx {
                let dx = ox as isize - px as isize;
                let (x0, x1) = valid_range(dx, x);
                for oy in 0..ky {
                    let dy = oy as isize - py as isize;
                    let (y0, y1) = valid_range(dy, y);
                    for oz in 0..kz {
                        let dz = oz as isize - pz as isize;
                        let (z0, z1) = valid_range(dz, z);
                        if x0 >= x1 || y0 >= y1 || z0 >= z1 {
                            continue;
                        }
                        let widx = (((co * cin + ci) * kx + ox) * ky + oy) * kz + oz;
                        let w = weight.data[widx];
                        let mut wacc = 0.0f32;
                        if dz == 0 && z0 == 0 && z1 == z {
                            let run = (y1 - y0) * z;
                            for vx in x0..x1 {
                                let sx = (vx as isize + dx) as usize;
                                let sy = (y0 as isize + dy) as usize;
                                let ob = (vx * y + y0) * z;
                                let ib = (sx * y + sy) * z;
                                let go = &go_ch[ob..ob + run];
                                let inp = &in_ch[ib..ib + run];
                                let gi = &mut gin_ch[ib..ib + run];
                                for (g, &o) in gi.iter_mut().zip(go.iter()) {
                                    *g += w * o;
                                }
                                // 4-lane accumulators so the reduction
                                // vectorizes; summation order is fixed
                                let mut acc = [0f32; 4];
                                let chunks = run / 4;
                                for i in 0..chunks {
                                    for lane in 0..4 {
                                        acc[lane] += go[4 * i + lane] * inp[4 * i + lane];
                                    }
                                }
                                for i in 4 * chunks..run {
                                    acc[i % 4] += go[i] * inp[i];
                                }
                                wacc += (acc[0] + acc[1]) + (acc[2] + acc[3]);
                            }
                        } else {
                            for vx in x0..x1 {
                                let sx = (vx as isize + dx) as usize;
                                for vy in y0..y1 {
                                    let sy = (vy as isize + dy) as usize;
                                    let ob = (vx * y + vy) * z;
                                    let ib = (sx * y + sy) * z;
                                    let src_off = (z0 as isize + dz) as usize;
                                    let go = &go_ch[ob + z0..ob + z1];
                                    let inp = &in_ch[ib + src_off..ib + src_off + (z1 - z0)];
                                    let gi = &mut gin_ch[ib + src_off..ib + src_off + (z1 - z0)];
                                    for ((g, &o), &s) in
                                        gi.iter_mut().zip(go.iter()).zip(inp.iter())
                                    {
                                        *g += w * o;
                                        wacc += o * s;
                                    }
                                }
                            }
                        }
                        gw.data[widx] += wacc;
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

/// Output index range [lo, hi) for which `index + delta` stays in [0, n).
#[inline]
fn valid_range(delta: isize, n: usize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = ((n as isize - delta).min(n as isize)).max(0) as usize;
    (lo, hi)
}
