//! Channel-last convolution kernels over three spatial axes.
//!
//! 2D convolutions run through the same loops with a unit third axis.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub output: [usize; 3],
    pub transposed: bool,
}

impl ConvGeom {
    /// Zero "same" padding: output extent is `ceil(n / s)`.
    pub fn same(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], cin: usize, cout: usize) -> Self {
        let output = [0, 1, 2].map(|a| input[a].div_ceil(stride[a]));
        Self {
            input,
            kernel,
            stride,
            cin,
            cout,
            output,
            transposed: false,
        }
    }

    /// Transposed convolution; outputs past `output` are cropped.
    pub fn transposed(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], cin: usize, cout: usize, output: [usize; 3]) -> Self {
        Self {
            input,
            kernel,
            stride,
            cin,
            cout,
            output,
            transposed: true,
        }
    }

    fn pad(&self, axis: usize) -> isize {
        (self.kernel[axis] / 2) as isize
    }

    /// Calls `f(input_voxel, output_voxel, kernel_tap)` for every contributing triple.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ix, iy, iz] = self.input;
        let [ox, oy, oz] = self.output;
        let [kx, ky, kz] = self.kernel;
        if self.transposed {
            for x in 0..ix {
                for y in 0..iy {
                    for z in 0..iz {
                        let inp = (x * iy + y) * iz + z;
                        for a in 0..kx {
                            let u = x * self.stride[0] + a;
                            if u >= ox {
                                continue;
                            }
                            for b in 0..ky {
                                let v = y * self.stride[1] + b;
                                if v >= oy {
                                    continue;
                                }
                                for c in 0..kz {
                                    let w = z * self.stride[2] + c;
                                    if w >= oz {
                                        continue;
                                    }
                                    f(inp, (u * oy + v) * oz + w, (a * ky + b) * kz + c);
                                }
                            }
                        }
                    }
                }
            }
        } else {
            let (px, py, pz) = (self.pad(0), self.pad(1), self.pad(2));
            for u in 0..ox {
                for v in 0..oy {
                    for w in 0..oz {
                        let out = (u * oy + v) * oz + w;
                        for a in 0..kx {
                            let x = (u * self.stride[0]) as isize + a as isize - px;
                            if x < 0 || x >= ix as isize {
                                continue;
                            }
                            for b in 0..ky {
                                let y = (v * self.stride[1]) as isize + b as isize - py;
                                if y < 0 || y >= iy as isize {
                                    continue;
                                }
                                for c in 0..kz {
                                    let z = (w * self.stride[2]) as isize + c as isize - pz;
                                    if z < 0 || z >= iz as isize {
                                        continue;
                                    }
                                    let inp = (x as usize * iy + y as usize) * iz + z as usize;
                                    f(inp, out, (a * ky + b) * kz + c);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn output_len(&self) -> usize {
        self.output.iter().product::<usize>() * self.cout
    }

    pub fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        let slab = cin * cout;
        let mut out = vec![0.0; self.output_len()];
        self.for_each_tap(|i, o, t| {
            let xs = &input[i * cin..(i + 1) * cin];
            let ks = &kernel[t * slab..(t + 1) * slab];
            let os = &mut out[o * cout..(o + 1) * cout];
            for (ci, &a) in xs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (acc, &k) in os.iter_mut().zip(&ks[ci * cout..(ci + 1) * cout]) {
                    *acc += a * k;
                }
            }
        });
        out
    }

    /// Returns `(d input, d kernel)`; either side may be skipped.
    pub fn backward(
        &self,
        input: &[f64],
        kernel: &[f64],
        grad_out: &[f64],
        want_input: bool,
        want_kernel: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (cin, cout) = (self.cin, self.cout);
        let slab = cin * cout;
        let mut gin = want_input.then(|| vec![0.0; input.len()]);
        let mut gk = want_kernel.then(|| vec![0.0; kernel.len()]);
        self.for_each_tap(|i, o, t| {
            let gs = &grad_out[o * cout..(o + 1) * cout];
            if gs.iter().all(|&g| g == 0.0) {
                return;
            }
            if let Some(gin) = gin.as_mut() {
                let ks = &kernel[t * slab..(t + 1) * slab];
                let dst = &mut gin[i * cin..(i + 1) * cin];
                for (ci, d) in dst.iter_mut().enumerate() {
                    let row = &ks[ci * cout..(ci + 1) * cout];
                    *d += row.iter().zip(gs).map(|(k, g)| k * g).sum::<f64>();
                }
            }
            if let Some(gk) = gk.as_mut() {
                let xs = &input[i * cin..(i + 1) * cin];
                let dst = &mut gk[t * slab..(t + 1) * slab];
                for (ci, &a) in xs.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (d, &g) in dst[ci * cout..(ci + 1) * cout].iter_mut().zip(gs) {
                        *d += a * g;
                    }
                }
            }
        });
        (gin, gk)
    }
}
