//! Intra-group correspondence structure: per-pair match lists merged into
//! multi-image tracks, plus the union-find used for both group-level and
//! global track merging.

use std::collections::BTreeMap;

/// Union-find with path halving.
pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // Deterministic: the smaller root wins.
            if ra < rb {
                self.parent[rb] = ra;
            } else {
                self.parent[ra] = rb;
            }
        }
    }
}

/// One track inside a group: at most one point index per member image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupTrack {
    /// `entries[i]` is the point index in group member `i`, if observed there.
    pub entries: Vec<Option<usize>>,
}

impl GroupTrack {
    pub fn len(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tracks within one source-view group, built from pairwise match lists.
///
/// Components that would place two different points of the same image in
/// one track are contradictory and are dropped whole at construction.
#[derive(Debug, Clone, Default)]
pub struct GroupTracks {
    num_images: usize,
    tracks: Vec<GroupTrack>,
    /// (image, point) → track index.
    membership: BTreeMap<(usize, usize), usize>,
}

impl GroupTracks {
    pub fn empty(num_images: usize) -> Self {
        GroupTracks {
            num_images,
            tracks: Vec::new(),
            membership: BTreeMap::new(),
        }
    }

    /// Merge pairwise match lists `(image_i, image_j, [(u, v)])` into tracks.
    /// Indices `image_i`/`image_j` are group-member slots in `0..num_images`.
    pub fn from_pair_matches(
        num_images: usize,
        pair_matches: &[(usize, usize, Vec<(usize, usize)>)],
    ) -> Self {
        // Collect the distinct (image, point) nodes in deterministic order.
        let mut nodes: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut node_list: Vec<(usize, usize)> = Vec::new();
        let mut intern = |nodes: &mut BTreeMap<(usize, usize), usize>,
                          node_list: &mut Vec<(usize, usize)>,
                          key: (usize, usize)| {
            *nodes.entry(key).or_insert_with(|| {
                node_list.push(key);
                node_list.len() - 1
            })
        };
        let mut edges = Vec::new();
        for &(i, j, ref matches) in pair_matches {
            debug_assert!(i < num_images && j < num_images && i != j);
            for &(u, v) in matches {
                let a = intern(&mut nodes, &mut node_list, (i, u));
                let b = intern(&mut nodes, &mut node_list, (j, v));
                edges.push((a, b));
            }
        }
        let mut uf = UnionFind::new(node_list.len());
        for (a, b) in edges {
            uf.union(a, b);
        }
        // Group nodes by component root.
        let mut components: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (idx, &key) in node_list.iter().enumerate() {
            components.entry(uf.find(idx)).or_default().push(key);
        }
        let mut tracks = Vec::new();
        let mut membership = BTreeMap::new();
        'component: for (_, members) in components {
            let mut entries: Vec<Option<usize>> = vec![None; num_images];
            for &(img, pt) in &members {
                match entries[img] {
                    None => entries[img] = Some(pt),
                    // Contradiction: two points of one image in the component.
                    Some(existing) if existing != pt => continue 'component,
                    Some(_) => {}
                }
            }
            let track = GroupTrack { entries };
            if track.len() < 2 {
                continue;
            }
            let track_idx = tracks.len();
            for &(img, pt) in &members {
                membership.insert((img, pt), track_idx);
            }
            tracks.push(track);
        }
        GroupTracks {
            num_images,
            tracks,
            membership,
        }
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn tracks(&self) -> &[GroupTrack] {
        &self.tracks
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Track index containing point `u` of image `i`, if any.
    pub fn track_of(&self, image: usize, point: usize) -> Option<usize> {
        self.membership.get(&(image, point)).copied()
    }

    /// The projection of point `u` of image `i` into image `j`: the point of
    /// image `j` sharing u's track.
    pub fn partner(&self, image_i: usize, point_u: usize, image_j: usize) -> Option<usize> {
        let t = self.track_of(image_i, point_u)?;
        self.tracks[t].entries[image_j]
    }

    /// All other (image, point) entries of u's track, images ascending.
    pub fn partners_of(&self, image_i: usize, point_u: usize) -> Vec<(usize, usize)> {
        match self.track_of(image_i, point_u) {
            None => Vec::new(),
            Some(t) => self.tracks[t]
                .entries
                .iter()
                .enumerate()
                .filter_map(|(img, entry)| {
                    entry.and_then(|pt| {
                        if img == image_i {
                            None
                        } else {
                            Some((img, pt))
                        }
                    })
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chains_merge_into_one_track() {
        let tracks = GroupTracks::from_pair_matches(
            3,
            &[(0, 1, vec![(2, 5)]), (1, 2, vec![(5, 7)])],
        );
        assert_eq!(tracks.tracks().len(), 1);
        assert_eq!(tracks.tracks()[0].entries, vec![Some(2), Some(5), Some(7)]);
        assert_eq!(tracks.partner(0, 2, 2), Some(7));
        assert_eq!(tracks.partners_of(1, 5), vec![(0, 2), (2, 7)]);
    }

    #[test]
    fn contradictory_component_dropped() {
        // Point (0,1) matches two different points of image 1.
        let tracks = GroupTracks::from_pair_matches(2, &[(0, 1, vec![(1, 5), (1, 6)])]);
        assert!(tracks.is_empty());
        assert_eq!(tracks.partner(0, 1, 1), None);
    }

    #[test]
    fn unmatched_points_have_no_partners() {
        let tracks = GroupTracks::from_pair_matches(2, &[(0, 1, vec![(0, 0)])]);
        assert_eq!(tracks.partner(0, 3, 1), None);
        assert!(tracks.partners_of(1, 9).is_empty());
    }
}
