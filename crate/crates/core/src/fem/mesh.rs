use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DVector, Matrix3, Vector3};

use crate::error::{Error, Result};

/// Rest-state quantities of one tetrahedron.
#[derive(Debug, Clone)]
pub struct TetRest {
    pub volume: f64,
    /// Gradients of the four linear shape functions.
    pub shape_grads: [Vector3<f64>; 4],
}

/// Tetrahedral discretization of a deformable body.
#[derive(Debug, Clone)]
pub struct TetMesh {
    rest_positions: Vec<Vector3<f64>>,
    tets: Vec<[usize; 4]>,
    fixed_vertices: Vec<usize>,
    surface_vertices: Vec<usize>,
    rest: Vec<TetRest>,
}

impl TetMesh {
    /// Validates and precomputes rest data. When `surface_vertices` is
    /// `None` the boundary vertices (on faces used by a single tet) are used.
    pub fn new(
        rest_positions: Vec<Vector3<f64>>,
        tets: Vec<[usize; 4]>,
        fixed_vertices: Vec<usize>,
        surface_vertices: Option<Vec<usize>>,
    ) -> Result<Self> {
        let nv = rest_positions.len();
        if nv == 0 {
            return Err(Error::Mesh("mesh has no vertices".into()));
        }
        for (t, tet) in tets.iter().enumerate() {
            if let Some(&bad) = tet.iter().find(|&&i| i >= nv) {
                return Err(Error::Mesh(format!(
                    "tet {t} references vertex {bad} but there are only {nv} vertices"
                )));
            }
        }
        let (lo, hi) = rest_positions.iter().fold(
            (rest_positions[0], rest_positions[0]),
            |(lo, hi), p| (lo.inf(p), hi.sup(p)),
        );
        let diag = (hi - lo).norm();
        let vol_tol = 1e-12 * diag.powi(3);

        let mut rest = Vec::with_capacity(tets.len());
        for (index, tet) in tets.iter().enumerate() {
            let x = |k: usize| rest_positions[tet[k]];
            let dm = Matrix3::from_columns(&[x(1) - x(0), x(2) - x(0), x(3) - x(0)]);
            let volume = dm.determinant() / 6.0;
            if !(volume > vol_tol) {
                return Err(Error::DegenerateTet { index, volume });
            }
            let dm_inv = dm.try_inverse().ok_or(Error::DegenerateTet { index, volume })?;
            let g1: Vector3<f64> = dm_inv.row(0).transpose();
            let g2: Vector3<f64> = dm_inv.row(1).transpose();
            let g3: Vector3<f64> = dm_inv.row(2).transpose();
            rest.push(TetRest {
                volume,
                shape_grads: [-(g1 + g2 + g3), g1, g2, g3],
            });
        }

        let fixed_vertices = sorted_unique(fixed_vertices, nv, "fixed")?;
        let surface_vertices = match surface_vertices {
            Some(s) => sorted_unique(s, nv, "surface")?,
            None => boundary_vertices(&tets),
        };
        Ok(Self {
            rest_positions,
            tets,
            fixed_vertices,
            surface_vertices,
            rest,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.rest_positions.len()
    }

    pub fn num_dofs(&self) -> usize {
        3 * self.rest_positions.len()
    }

    pub fn rest_positions(&self) -> &[Vector3<f64>] {
        &self.rest_positions
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn rest_data(&self) -> &[TetRest] {
        &self.rest
    }

    pub fn fixed_vertices(&self) -> &[usize] {
        &self.fixed_vertices
    }

    pub fn surface_vertices(&self) -> &[usize] {
        &self.surface_vertices
    }

    /// Faces used by a single tet, wound counter-clockwise seen from outside,
    /// in sorted order.
    pub fn boundary_faces(&self) -> Vec<[usize; 3]> {
        const LOCAL: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];
        let mut faces: BTreeMap<[usize; 3], (usize, [usize; 3])> = BTreeMap::new();
        for t in &self.tets {
            for l in LOCAL {
                let f = l.map(|a| t[a]);
                let mut key = f;
                key.sort_unstable();
                faces.entry(key).or_insert((0, f)).0 += 1;
            }
        }
        faces.into_values().filter(|&(c, _)| c == 1).map(|(_, f)| f).collect()
    }

    pub fn total_volume(&self) -> f64 {
        self.rest.iter().map(|r| r.volume).sum()
    }

    /// Rest positions stacked as a `3 * |V|` vector.
    pub fn rest_state(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.num_dofs(),
            self.rest_positions.iter().flat_map(|p| p.iter().copied()),
        )
    }

    /// `true` for every degree of freedom that is not pinned.
    pub fn free_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.num_dofs()];
        for &v in &self.fixed_vertices {
            mask[3 * v..3 * v + 3].fill(false);
        }
        mask
    }

    pub fn with_fixed(mut self, fixed: Vec<usize>) -> Result<Self> {
        self.fixed_vertices = sorted_unique(fixed, self.num_vertices(), "fixed")?;
        Ok(self)
    }

    /// Pins every vertex for which `pred` holds.
    pub fn fix_where(self, pred: impl Fn(&Vector3<f64>) -> bool) -> Result<Self> {
        let fixed = (0..self.num_vertices())
            .filter(|&i| pred(&self.rest_positions[i]))
            .collect();
        self.with_fixed(fixed)
    }

    /// Reads the plain-text format written by [`TetMesh::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());

        let (hl, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty mesh file".into(),
        })?;
        let words: Vec<&str> = header.split_whitespace().collect();
        let (nv, nt) = match words.as_slice() {
            ["vertices", n, "tets", t] => (parse_num::<usize>(n, hl)?, parse_num::<usize>(t, hl)?),
            _ => {
                return Err(Error::Parse {
                    line: hl,
                    msg: "expected header `vertices N tets T`".into(),
                })
            }
        };

        let mut positions = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, l) = lines.next().ok_or(Error::Parse {
                line: hl,
                msg: format!("expected {nv} vertex lines"),
            })?;
            let v = parse_row::<f64>(l, ln, 3)?;
            positions.push(Vector3::new(v[0], v[1], v[2]));
        }
        let mut tets = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, l) = lines.next().ok_or(Error::Parse {
                line: hl,
                msg: format!("expected {nt} tet lines"),
            })?;
            let v = parse_row::<usize>(l, ln, 4)?;
            tets.push([v[0], v[1], v[2], v[3]]);
        }
        let mut fixed = Vec::new();
        let mut surface = None;
        for (ln, l) in lines {
            let mut it = l.split_whitespace();
            let key = it.next().unwrap_or_default();
            let ids = it
                .map(|w| parse_num::<usize>(w, ln))
                .collect::<Result<Vec<_>>>()?;
            match key {
                "fixed" => fixed.extend(ids),
                "surface" => surface.get_or_insert_with(Vec::new).extend(ids),
                other => {
                    return Err(Error::Parse {
                        line: ln,
                        msg: format!("unexpected section `{other}`"),
                    })
                }
            }
        }
        TetMesh::new(positions, tets, fixed, surface)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vertices {} tets {}", self.num_vertices(), self.tets.len());
        for p in &self.rest_positions {
            let _ = writeln!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
        }
        for t in &self.tets {
            let _ = writeln!(s, "{} {} {} {}", t[0], t[1], t[2], t[3]);
        }
        if !self.fixed_vertices.is_empty() {
            s.push_str("fixed");
            for i in &self.fixed_vertices {
                let _ = write!(s, " {i}");
            }
            s.push('\n');
        }
        s.push_str("surface");
        for i in &self.surface_vertices {
            let _ = write!(s, " {i}");
        }
        s.push('\n');
        s
    }

    /// Box of `cells[0] x cells[1] x cells[2]` cubes, each split into five
    /// tetrahedra with alternating orientation so faces match.
    pub fn box_grid(cells: [usize; 3], extent: Vector3<f64>, origin: Vector3<f64>) -> Result<Self> {
        let [nx, ny, nz] = cells;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Mesh("box grid needs at least one cell per axis".into()));
        }
        let idx = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
        let mut positions = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
        for k in 0..=nz {
            for j in 0..=ny {
                for i in 0..=nx {
                    positions.push(
                        origin
                            + Vector3::new(
                                extent.x * i as f64 / nx as f64,
                                extent.y * j as f64 / ny as f64,
                                extent.z * k as f64 / nz as f64,
                            ),
                    );
                }
            }
        }
        // Corner numbering: bit 0 -> x, bit 1 -> y, bit 2 -> z.
        const EVEN: [[usize; 4]; 5] = [[1, 2, 4, 7], [0, 1, 2, 4], [3, 1, 2, 7], [5, 1, 4, 7], [6, 2, 4, 7]];
        const ODD: [[usize; 4]; 5] = [[0, 3, 5, 6], [1, 0, 3, 5], [2, 0, 3, 6], [4, 0, 5, 6], [7, 3, 5, 6]];
        let mut tets = Vec::with_capacity(5 * nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let corner = |c: usize| idx(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                    let pattern = if (i + j + k) % 2 == 0 { &EVEN } else { &ODD };
                    for t in pattern {
                        let mut tet = t.map(corner);
                        let p = |a: usize| positions[tet[a]];
                        let vol = (p(1) - p(0)).cross(&(p(2) - p(0))).dot(&(p(3) - p(0)));
                        if vol < 0.0 {
                            tet.swap(2, 3);
                        }
                        tets.push(tet);
                    }
                }
            }
        }
        TetMesh::new(positions, tets, Vec::new(), None)
    }

    /// Copy of the mesh with all rest positions mapped through `f`.
    pub fn transformed(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Result<Self> {
        TetMesh::new(
            self.rest_positions.iter().map(f).collect(),
            self.tets.clone(),
            self.fixed_vertices.clone(),
            Some(self.surface_vertices.clone()),
        )
    }
}

fn sorted_unique(ids: Vec<usize>, nv: usize, what: &str) -> Result<Vec<usize>> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= nv) {
        return Err(Error::Mesh(format!("{what} vertex {bad} out of range ({nv} vertices)")));
    }
    Ok(ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect())
}

fn boundary_vertices(tets: &[[usize; 4]]) -> Vec<usize> {
    let mut faces: HashMap<[usize; 3], usize> = HashMap::new();
    for t in tets {
        for skip in 0..4 {
            let mut f = [0; 3];
            let mut n = 0;
            for (a, &v) in t.iter().enumerate() {
                if a != skip {
                    f[n] = v;
                    n += 1;
                }
            }
            f.sort_unstable();
            *faces.entry(f).or_default() += 1;
        }
    }
    faces
        .into_iter()
        .filter(|&(_, c)| c == 1)
        .flat_map(|(f, _)| f)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn parse_num<T: std::str::FromStr>(w: &str, line: usize) -> Result<T> {
    w.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse `{w}`"),
    })
}

fn parse_row<T: std::str::FromStr>(l: &str, line: usize, n: usize) -> Result<Vec<T>> {
    let v = l
        .split_whitespace()
        .map(|w| parse_num(w, line))
        .collect::<Result<Vec<T>>>()?;
    if v.len() != n {
        return Err(Error::Parse {
            line,
            msg: format!("expected {n} values, found {}", v.len()),
        });
    }
    Ok(v)
}
