//! Kernels used by the benchmarks.
//!
//! Geometry doubles as the parameter block: the runtime passes nothing else
//! to a kernel body, so extents and face numbers travel in `groups`/`local`.

use hrt_core::{KernelDefinition, KernelRef, Result, Runtime};

pub const DGEMM: &str = "dgemm";
/// Same cost as [`DGEMM`] but skips the arithmetic.
pub const DGEMM_TIMING: &str = "dgemm_timing";
pub const TOUCH: &str = "touch";
pub const JACOBI_INIT: &str = "jacobi_init";
pub const JACOBI_PACK: &str = "jacobi_pack";
pub const JACOBI_UNPACK: &str = "jacobi_unpack";
pub const JACOBI_UPDATE: &str = "jacobi_update";

/// `C = A * B` for square row-major `n x n` matrices, `n = groups[0]`.
pub fn dgemm_host(n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[i * n + k] * b[k * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

/// Registers both DGEMM variants; each launch is charged `cost(n)` seconds.
pub fn register_dgemm(rt: &Runtime, cost: impl Fn(usize) -> f64 + Send + Sync + Clone + 'static) -> Result<(KernelRef, KernelRef)> {
    let c1 = cost.clone();
    let full = rt.register_kernel(
        KernelDefinition::new(DGEMM)
            .everywhere(|inv| {
                let n = inv.geometry.groups[0] as usize;
                let a = inv.args[0].as_slice::<f64>().to_vec();
                let b = inv.args[1].as_slice::<f64>().to_vec();
                dgemm_host(n, &a, &b, inv.args[2].as_mut_slice::<f64>());
                Ok(())
            })
            .cost(move |g| c1(g.groups[0] as usize)),
    )?;
    let timing = rt.register_kernel(
        KernelDefinition::new(DGEMM_TIMING)
            .everywhere(|_| Ok(()))
            .cost(move |g| cost(g.groups[0] as usize)),
    )?;
    Ok((full, timing))
}

/// Read-write no-op with zero cost: pulls an object onto a device and marks
/// the device copy as the newest.
pub fn register_touch(rt: &Runtime) -> Result<KernelRef> {
    rt.register_kernel(KernelDefinition::new(TOUCH).everywhere(|_| Ok(())).fixed_cost(0.0))
}

/// Padded chunk layout: interior `n` cells per axis plus one ghost layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkShape {
    pub n: [usize; 3],
}

impl ChunkShape {
    pub fn padded(&self) -> [usize; 3] {
        [self.n[0] + 2, self.n[1] + 2, self.n[2] + 2]
    }

    pub fn padded_len(&self) -> usize {
        let p = self.padded();
        p[0] * p[1] * p[2]
    }

    pub fn cells(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        let p = self.padded();
        (i * p[1] + j) * p[2] + k
    }

    /// Cells on a face: 0/1 are -x/+x, 2/3 -y/+y, 4/5 -z/+z.
    pub fn face_len(&self, face: usize) -> usize {
        let [x, y, z] = self.n;
        match face / 2 {
            0 => y * z,
            1 => x * z,
            _ => x * y,
        }
    }

    /// Padded index of element `(a, b)` of the plane at `layer` across the
    /// face's axis. `(a, b)` run over the two remaining axes in order.
    pub fn plane_idx(&self, face: usize, layer: usize, a: usize, b: usize) -> usize {
        match face / 2 {
            0 => self.idx(layer, a + 1, b + 1),
            1 => self.idx(a + 1, layer, b + 1),
            _ => self.idx(a + 1, b + 1, layer),
        }
    }

    pub fn plane_dims(&self, face: usize) -> (usize, usize) {
        let [x, y, z] = self.n;
        match face / 2 {
            0 => (y, z),
            1 => (x, z),
            _ => (x, y),
        }
    }

    pub fn axis_len(&self, face: usize) -> usize {
        self.n[face / 2]
    }

    /// Copies the interior plane next to `face` into `out`.
    pub fn pack(&self, u: &[f64], face: usize, out: &mut [f64]) {
        let layer = if face.is_multiple_of(2) { 1 } else { self.axis_len(face) };
        let (da, db) = self.plane_dims(face);
        for a in 0..da {
            for b in 0..db {
                out[a * db + b] = u[self.plane_idx(face, layer, a, b)];
            }
        }
    }

    /// Writes a neighbour's plane into the ghost layer on `face`.
    pub fn unpack(&self, u: &mut [f64], face: usize, halo: &[f64]) {
        let layer = if face.is_multiple_of(2) { 0 } else { self.axis_len(face) + 1 };
        let (da, db) = self.plane_dims(face);
        for a in 0..da {
            for b in 0..db {
                u[self.plane_idx(face, layer, a, b)] = halo[a * db + b];
            }
        }
    }

    /// One Jacobi sweep over the interior. The summation order is fixed so
    /// results do not depend on how the domain is cut.
    pub fn update(&self, u: &[f64], out: &mut [f64]) {
        let [x, y, z] = self.n;
        let p = self.padded();
        let sj = p[2];
        let si = p[1] * p[2];
        for i in 1..=x {
            for j in 1..=y {
                for k in 1..=z {
                    let c = self.idx(i, j, k);
                    out[c] = (((((u[c - si] + u[c + si]) + u[c - sj]) + u[c + sj]) + u[c - 1]) + u[c + 1]) / 6.0;
                }
            }
        }
    }

    /// Ghost cells at 1.0, interior at 0.0.
    pub fn init(&self, u: &mut [f64]) {
        u.fill(1.0);
        let [x, y, z] = self.n;
        for i in 1..=x {
            for j in 1..=y {
                for k in 1..=z {
                    u[self.idx(i, j, k)] = 0.0;
                }
            }
        }
    }

    fn from_groups(g: [u32; 3]) -> Self {
        Self {
            n: [g[0] as usize, g[1] as usize, g[2] as usize],
        }
    }
}

/// Modelled Jacobi kernel costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobiCosts {
    /// Seconds per interior cell of an update sweep.
    pub cell: f64,
    /// Seconds per cell packed or unpacked.
    pub face_cell: f64,
    /// Fixed launch overhead added to every kernel.
    pub launch: f64,
}

impl Default for JacobiCosts {
    fn default() -> Self {
        Self {
            cell: 1e-10,
            face_cell: 1e-10,
            launch: 5e-6,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JacobiKernels {
    pub init: KernelRef,
    pub pack: KernelRef,
    pub unpack: KernelRef,
    pub update: KernelRef,
}

/// Launch geometry for chunk kernels: `groups` carries the interior extents,
/// `local[0]` the face number plus one.
pub fn jacobi_geometry(shape: ChunkShape, face: usize) -> ([u32; 3], [u32; 3]) {
    (
        [shape.n[0] as u32, shape.n[1] as u32, shape.n[2] as u32],
        [face as u32 + 1, 1, 1],
    )
}

pub fn register_jacobi(rt: &Runtime, costs: JacobiCosts) -> Result<JacobiKernels> {
    let face_of = |g: &hrt_device::ThreadGeometry| g.local[0] as usize - 1;
    let init = rt.register_kernel(
        KernelDefinition::new(JACOBI_INIT)
            .everywhere(|inv| {
                let s = ChunkShape::from_groups(inv.geometry.groups);
                for a in inv.args.iter_mut() {
                    s.init(a.as_mut_slice::<f64>());
                }
                Ok(())
            })
            .fixed_cost(0.0),
    )?;
    let pack = rt.register_kernel(
        KernelDefinition::new(JACOBI_PACK)
            .everywhere(move |inv| {
                let s = ChunkShape::from_groups(inv.geometry.groups);
                let face = face_of(&inv.geometry);
                let (u, rest) = inv.args.split_at_mut(1);
                s.pack(u[0].as_slice::<f64>(), face, rest[0].as_mut_slice::<f64>());
                Ok(())
            })
            .cost(move |g| {
                let s = ChunkShape::from_groups(g.groups);
                costs.launch + s.face_len(face_of(g)) as f64 * costs.face_cell
            }),
    )?;
    let unpack = rt.register_kernel(
        KernelDefinition::new(JACOBI_UNPACK)
            .everywhere(move |inv| {
                let s = ChunkShape::from_groups(inv.geometry.groups);
                let face = face_of(&inv.geometry);
                let (halo, rest) = inv.args.split_at_mut(1);
                s.unpack(rest[0].as_mut_slice::<f64>(), face, halo[0].as_slice::<f64>());
                Ok(())
            })
            .cost(move |g| {
                let s = ChunkShape::from_groups(g.groups);
                costs.launch + s.face_len(face_of(g)) as f64 * costs.face_cell
            }),
    )?;
    let update = rt.register_kernel(
        KernelDefinition::new(JACOBI_UPDATE)
            .everywhere(|inv| {
                let s = ChunkShape::from_groups(inv.geometry.groups);
                let (u, rest) = inv.args.split_at_mut(1);
                s.update(u[0].as_slice::<f64>(), rest[0].as_mut_slice::<f64>());
                Ok(())
            })
            .cost(move |g| {
                let s = ChunkShape::from_groups(g.groups);
                costs.launch + s.cells() as f64 * costs.cell
            }),
    )?;
    Ok(JacobiKernels {
        init,
        pack,
        unpack,
        update,
    })
}
