//! Bags of instances and their text file format.
//!
//! ```text
//! MIVPG-BAG v1
//! N <n>
//! P <p> D <d>
//! <p lines of d space-separated floats>
//! ...one P block per image
//! ```
//!
//! A file with `N 1` loads as a flat bag whose instances are that image's rows.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BAG_MAGIC: &str = "MIVPG-BAG v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// One image; its patch tokens are the instances.
    Flat = 1,
    /// Several images, one embedding each.
    Images = 2,
    /// Several images with several patches each.
    ImagesWithPatches = 3,
}

impl Scenario {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Scenario::Flat),
            2 => Ok(Scenario::Images),
            3 => Ok(Scenario::ImagesWithPatches),
            _ => Err(Error::Config(format!("scenario must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Bag {
    Flat(Tensor),
    Hierarchical(Vec<Tensor>),
}

impl Bag {
    pub fn flat(instances: Tensor) -> Result<Self> {
        let (m, _) = instances.dims2("Bag::flat")?;
        if m == 0 {
            return Err(Error::EmptyBag("Bag::flat"));
        }
        Ok(Bag::Flat(instances))
    }

    pub fn hierarchical(images: Vec<Tensor>) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyBag("Bag::hierarchical"))?;
        let (_, d) = first.dims2("Bag::hierarchical")?;
        for img in &images {
            let (p, di) = img.dims2("Bag::hierarchical")?;
            if p == 0 {
                return Err(Error::EmptyBag("image group"));
            }
            if di != d {
                return Err(Error::shape("Bag::hierarchical", first.shape(), img.shape()));
            }
        }
        Ok(Bag::Hierarchical(images))
    }

    pub fn scenario(&self) -> Scenario {
        match self {
            Bag::Flat(_) => Scenario::Flat,
            Bag::Hierarchical(imgs) if imgs.iter().all(|i| i.rows() == 1) => Scenario::Images,
            Bag::Hierarchical(_) => Scenario::ImagesWithPatches,
        }
    }

    pub fn instance_dim(&self) -> usize {
        self.groups()[0].cols()
    }

    /// Image groups; a flat bag is a single group.
    pub fn groups(&self) -> Vec<&Tensor> {
        match self {
            Bag::Flat(t) => vec![t],
            Bag::Hierarchical(imgs) => imgs.iter().collect(),
        }
    }

    pub fn num_images(&self) -> usize {
        self.groups().len()
    }

    pub fn total_patches(&self) -> usize {
        self.groups().iter().map(|g| g.rows()).sum()
    }

    /// Instances seen by the block stack: patches of a flat bag, images otherwise.
    pub fn num_instances(&self) -> usize {
        match self {
            Bag::Flat(t) => t.rows(),
            Bag::Hierarchical(imgs) => imgs.len(),
        }
    }

    /// All patch rows stacked in image order.
    pub fn flattened(&self) -> Result<Tensor> {
        Tensor::concat_rows(&self.groups())
    }

    /// Reorders block-level instances: rows of a flat bag, images otherwise.
    /// Position `i` of the result holds instance `perm[i]`.
    pub fn permute_instances(&self, perm: &[usize]) -> Result<Bag> {
        check_permutation(perm, self.num_instances())?;
        Ok(match self {
            Bag::Flat(t) => Bag::Flat(t.gather_rows(perm)?),
            Bag::Hierarchical(imgs) => {
                Bag::Hierarchical(perm.iter().map(|&i| imgs[i].clone()).collect())
            }
        })
    }

    /// Reorders the patches of one image.
    pub fn permute_patches(&self, image: usize, perm: &[usize]) -> Result<Bag> {
        match self {
            Bag::Flat(t) if image == 0 => {
                check_permutation(perm, t.rows())?;
                Ok(Bag::Flat(t.gather_rows(perm)?))
            }
            Bag::Hierarchical(imgs) if image < imgs.len() => {
                check_permutation(perm, imgs[image].rows())?;
                let mut out = imgs.clone();
                out[image] = imgs[image].gather_rows(perm)?;
                Ok(Bag::Hierarchical(out))
            }
            _ => Err(Error::Index {
                index: image,
                len: self.num_images(),
            }),
        }
    }

    pub fn to_text(&self) -> String {
        let groups = self.groups();
        let mut out = String::new();
        writeln!(out, "{BAG_MAGIC}").unwrap();
        writeln!(out, "N {}", groups.len()).unwrap();
        for g in groups {
            writeln!(out, "P {} D {}", g.rows(), g.cols()).unwrap();
            for r in 0..g.rows() {
                let line: Vec<String> = g.row(r).iter().map(|v| format!("{v}")).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Bag> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Bag::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Bag> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
        };

        let (ln, magic) = next("header")?;
        if magic != BAG_MAGIC {
            return Err(err(ln, format!("expected `{BAG_MAGIC}`, found `{magic}`")));
        }
        let (ln, n_line) = next("image count")?;
        let n = parse_tagged(n_line, &["N"]).map_err(|m| err(ln, m))?[0];
        if n == 0 {
            return Err(err(ln, "bag has no images".into()));
        }

        let mut images = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, header) = next("image header")?;
            let pd = parse_tagged(header, &["P", "D"]).map_err(|m| err(ln, m))?;
            let (p, d) = (pd[0], pd[1]);
            if p == 0 || d == 0 {
                return Err(err(ln, format!("image with P={p} D={d}")));
            }
            let mut data = Vec::with_capacity(p * d);
            for _ in 0..p {
                let (ln, row) = next("patch row")?;
                let before = data.len();
                for tok in row.split(' ') {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| err(ln, format!("bad number `{tok}`")))?;
                    data.push(v);
                }
                if data.len() - before != d {
                    return Err(err(ln, format!("expected {d} values, found {}", data.len() - before)));
                }
            }
            images.push(Tensor::matrix(p, d, data)?);
        }
        if let Some((ln, extra)) = lines.next() {
            if !extra.trim().is_empty() {
                return Err(err(ln, "trailing content after last image".into()));
            }
        }
        if images.len() == 1 {
            Bag::flat(images.pop().expect("one image"))
        } else {
            Bag::hierarchical(images)
        }
    }
}

fn parse_tagged(line: &str, tags: &[&str]) -> std::result::Result<Vec<usize>, String> {
    let toks: Vec<&str> = line.split(' ').collect();
    if toks.len() != 2 * tags.len() {
        return Err(format!("expected `{}`, found `{line}`", tags.join(" <n> ") + " <n>"));
    }
    tags.iter()
        .enumerate()
        .map(|(i, tag)| {
            if toks[2 * i] != *tag {
                return Err(format!("expected `{tag}`, found `{}`", toks[2 * i]));
            }
            toks[2 * i + 1]
                .parse()
                .map_err(|_| format!("bad count `{}`", toks[2 * i + 1]))
        })
        .collect()
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::shape("permutation", &[perm.len()], &[n]));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Contract(format!("{perm:?} is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> Bag {
        let mut rng = Rng::new(3);
        Bag::hierarchical(vec![
            Tensor::randn(&[2, 3], 1.0, &mut rng),
            Tensor::randn(&[4, 3], 1.0, &mut rng),
        ])
        .unwrap()
    }

    #[test]
    fn exact_text_layout() {
        let bag = Bag::hierarchical(vec![
            Tensor::from_rows(&[[1.0, -2.5]]).unwrap(),
            Tensor::from_rows(&[[0.125, 3.0], [4.0, 0.0]]).unwrap(),
        ])
        .unwrap();
        assert_eq!(
            bag.to_text(),
            "MIVPG-BAG v1\nN 2\nP 1 D 2\n1 -2.5\nP 2 D 2\n0.125 3\n4 0\n"
        );
    }

    #[test]
    fn text_round_trip_is_exact() {
        let bag = sample();
        let back = Bag::parse(&bag.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, bag);
    }

    #[test]
    fn single_image_loads_flat() {
        let text = "MIVPG-BAG v1\nN 1\nP 2 D 1\n1\n2\n";
        let bag = Bag::parse(text, Path::new("mem")).unwrap();
        assert_eq!(bag.scenario(), Scenario::Flat);
        assert_eq!(bag.num_instances(), 2);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("MIVPG-BAG v2\nN 1\n", 1),
            ("MIVPG-BAG v1\nN x\n", 2),
            ("MIVPG-BAG v1\nN 1\nP 1 D 2\n1\n", 4),
            ("MIVPG-BAG v1\nN 1\nP 1 D 1\nabc\n", 4),
        ];
        for (text, line) in cases {
            match Bag::parse(text, Path::new("mem")) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn scenarios_follow_shape() {
        assert_eq!(sample().scenario(), Scenario::ImagesWithPatches);
        let imgs = Bag::hierarchical(vec![Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2])]).unwrap();
        assert_eq!(imgs.scenario(), Scenario::Images);
    }

    #[test]
    fn empty_groups_rejected() {
        assert!(Bag::hierarchical(vec![]).is_err());
        assert!(Bag::hierarchical(vec![Tensor::zeros(&[0, 2])]).is_err());
        assert!(Bag::flat(Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn permutations_are_validated() {
        let bag = sample();
        assert!(bag.permute_instances(&[0, 0]).is_err());
        let swapped = bag.permute_instances(&[1, 0]).unwrap();
        assert_eq!(swapped.groups()[0], bag.groups()[1]);
        assert!(bag.permute_patches(1, &[3, 2, 1, 0]).is_ok());
        assert!(bag.permute_patches(2, &[0]).is_err());
    }
}
