//! 3D connected-component labelling.

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::volume::{BinaryMask, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(26);
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u32> for Connectivity {
    type Error = crate::Error;
    fn try_from(v: u32) -> crate::Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(crate::Error::InvalidArgument(format!(
                "connectivity must be 6 or 26, got {other}"
            ))),
        }
    }
}

/// One connected set of true voxels, stored as flat indices into the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectedComponent {
    voxels: Vec<usize>,
    centroid: [f64; 3],
}

impl ConnectedComponent {
    /// Build from flat indices; indices are sorted, the centroid is derived.
    pub fn from_voxels(mut voxels: Vec<usize>, shape: [usize; 3]) -> Self {
        assert!(!voxels.is_empty(), "component must be non-empty");
        voxels.sort_unstable();
        voxels.dedup();
        let mut sum = [0f64; 3];
        for &v in &voxels {
            let c = unflatten(v, shape);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
        }
        let n = voxels.len() as f64;
        ConnectedComponent {
            centroid: [sum[0] / n, sum[1] / n, sum[2] / n],
            voxels,
        }
    }

    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    pub fn size(&self) -> usize {
        self.voxels.len()
    }

    pub fn centroid(&self) -> [f64; 3] {
        self.centroid
    }

    /// Number of shared voxels; both index lists are sorted.
    pub fn overlap(&self, other: &ConnectedComponent) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.voxels, &other.voxels);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

#[inline]
pub(crate) fn unflatten(idx: usize, shape: [usize; 3]) -> [usize; 3] {
    let k = idx % shape[2];
    let j = (idx / shape[2]) % shape[1];
    let i = idx / (shape[1] * shape[2]);
    [i, j, k]
}

#[inline]
pub(crate) fn flatten(c: [usize; 3], shape: [usize; 3]) -> usize {
    (c[0] * shape[1] + c[1]) * shape[2] + c[2]
}

/// Neighbour flat indices of `idx` under `offsets`.
pub(crate) fn neighbours<'a>(
    idx: usize,
    shape: [usize; 3],
    offsets: &'a [[isize; 3]],
) -> impl Iterator<Item = usize> + 'a {
    let c = unflatten(idx, shape);
    offsets.iter().filter_map(move |o| {
        let mut n = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as isize + o[a];
            if v < 0 || v >= shape[a] as isize {
                return None;
            }
            n[a] = v as usize;
        }
        Some(flatten(n, shape))
    })
}

/// Components of the true voxels of `mask`, ordered by size (descending) and
/// then centroid (lexicographic).
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<ConnectedComponent> {
    components_of(mask.as_slice(), mask.shape(), connectivity)
}

pub(crate) fn components_of(
    data: &[bool],
    shape: [usize; 3],
    connectivity: Connectivity,
) -> Vec<ConnectedComponent> {
    let offsets = connectivity.offsets();
    let mut seen = vec![false; data.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if !data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        while let Some(v) = queue.pop_front() {
            voxels.push(v);
            for n in neighbours(v, shape, &offsets) {
                if data[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        out.push(ConnectedComponent::from_voxels(voxels, shape));
    }
    sort_components(&mut out);
    out
}

pub(crate) fn sort_components(list: &mut [ConnectedComponent]) {
    list.sort_by(|a, b| {
        b.size().cmp(&a.size()).then_with(|| {
            a.centroid
                .iter()
                .zip(b.centroid.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    });
}
