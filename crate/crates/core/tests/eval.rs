use dynprompt::backend::Image;
use dynprompt::eval::{
    clip_score, iou_at, iou_curve, self_similarity, structure_dist, Embedder, Featurizer, PixelPatchFeaturizer,
    DEFAULT_IOU_STEPS,
};
use dynprompt::Result;
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;

#[test]
fn map_equal_to_ground_truth_scores_one() {
    let gt = Array2::from_shape_fn((8, 8), |(i, j)| i < 4 && j > 2);
    let map = gt.mapv(|g| if g { 1.0 } else { 0.0 });
    let c = iou_curve(&map, &gt, DEFAULT_IOU_STEPS).unwrap();
    for (th, v) in c.thresholds.iter().zip(&c.iou) {
        if *th > 0.0 && *th < 1.0 {
            assert_eq!(*v, 1.0);
        }
    }
}

#[test]
fn half_overlap_hand_case() {
    let mut gt = Array2::from_elem((4, 4), false);
    gt[[0, 0]] = true;
    gt[[0, 1]] = true;
    let mut map = Array2::zeros((4, 4));
    map[[0, 1]] = 1.0;
    map[[0, 2]] = 1.0;
    let c = iou_curve(&map, &gt, DEFAULT_IOU_STEPS).unwrap();
    assert!((c.at(0.5) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn disjoint_map_scores_zero() {
    let gt = Array2::from_shape_fn((4, 4), |(i, _)| i == 0);
    let map = Array2::from_shape_fn((4, 4), |(i, _)| if i == 3 { 1.0 } else { 0.0 });
    let c = iou_curve(&map, &gt, 11).unwrap();
    assert!(c.iou[1..].iter().all(|&v| v == 0.0));
}

#[test]
fn empty_ground_truth_is_an_error() {
    let gt = Array2::from_elem((4, 4), false);
    assert!(iou_curve(&Array2::zeros((4, 4)), &gt, 11).is_err());
    assert!(iou_curve(&Array2::zeros((4, 4)), &Array2::from_elem((4, 4), true), 1).is_err());
}

#[test]
fn empty_binarization_is_zero() {
    let gt = Array2::from_elem((2, 2), true);
    assert_eq!(iou_at(&Array2::zeros((2, 2)), &gt, 0.5), 0.0);
}

struct Fixed(Vec<f64>, Vec<f64>);

impl Embedder for Fixed {
    fn embed_image(&self, _: &Image) -> Result<Array1<f64>> {
        Ok(Array1::from(self.0.clone()))
    }
    fn embed_text(&self, _: &str) -> Result<Array1<f64>> {
        Ok(Array1::from(self.1.clone()))
    }
}

struct Offline;

impl Embedder for Offline {
    fn embed_image(&self, _: &Image) -> Result<Array1<f64>> {
        Err(dynprompt::Error::NotFound("embedding server".into()))
    }
    fn embed_text(&self, _: &str) -> Result<Array1<f64>> {
        Err(dynprompt::Error::NotFound("embedding server".into()))
    }
}

fn img() -> Image {
    Image::new(Array3::from_shape_fn((2, 4, 4), |(c, i, j)| (c + i * j) as f64))
}

#[test]
fn clip_score_extremes() {
    let texts = vec!["a cat".to_string()];
    assert_eq!(clip_score(&[img()], &texts, &Fixed(vec![1.0, 0.0], vec![1.0, 0.0])), Some(100.0));
    assert_eq!(clip_score(&[img()], &texts, &Fixed(vec![1.0, 0.0], vec![0.0, 1.0])), Some(0.0));
    assert_eq!(clip_score(&[img()], &texts, &Fixed(vec![1.0, 0.0], vec![-1.0, 0.0])), Some(0.0));
    assert_eq!(clip_score(&[img()], &texts, &Offline), None);
}

#[test]
fn structure_dist_of_identical_images_is_zero() {
    let f = PixelPatchFeaturizer { patch: 2 };
    assert_eq!(structure_dist(&img(), &img(), &f), Some(0.0));
    assert_eq!(structure_dist(&img(), &img(), &PixelPatchFeaturizer { patch: 3 }), None);
}

#[test]
fn structure_dist_of_permuted_patches_matches_oracle() {
    let a = Image::new(Array3::from_shape_fn((1, 4, 4), |(_, i, j)| ((i * 7 + j * 3) % 5) as f64 + 0.5));
    // swap the two top patches
    let mut b = a.clone();
    for i in 0..2 {
        for j in 0..2 {
            b.data[[0, i, j]] = a.data[[0, i, j + 2]];
            b.data[[0, i, j + 2]] = a.data[[0, i, j]];
        }
    }
    let f = PixelPatchFeaturizer { patch: 2 };
    let patches = |im: &Image| -> Vec<Vec<f64>> {
        (0..4)
            .map(|k| {
                let (pi, pj) = (k / 2, k % 2);
                (0..4).map(|r| im.data[[0, pi * 2 + r / 2, pj * 2 + r % 2]]).collect()
            })
            .collect()
    };
    let sim = |p: &[Vec<f64>]| -> Vec<Vec<f64>> {
        p.iter()
            .map(|x| {
                p.iter()
                    .map(|y| {
                        let d: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
                        let nx: f64 = x.iter().map(|u| u * u).sum::<f64>().sqrt();
                        let ny: f64 = y.iter().map(|u| u * u).sum::<f64>().sqrt();
                        d / (nx * ny)
                    })
                    .collect()
            })
            .collect()
    };
    let (sa, sb) = (sim(&patches(&a)), sim(&patches(&b)));
    let mut oracle = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            oracle += (sa[i][j] - sb[i][j]).powi(2) / 16.0;
        }
    }
    let got = structure_dist(&a, &b, &f).unwrap();
    assert!((got - oracle).abs() < 1e-12);
    assert!(got > 0.0);
}

struct Features(Array2<f64>);

impl Featurizer for Features {
    fn patch_features(&self, _: &Image) -> Result<Array2<f64>> {
        Ok(self.0.clone())
    }
}

#[test]
fn self_similarity_has_unit_diagonal() {
    let f = Features(Array2::from_shape_fn((3, 4), |(i, j)| (i + j + 1) as f64));
    let s = self_similarity(&f.patch_features(&img()).unwrap());
    for i in 0..3 {
        assert!((s[[i, i]] - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn iou_curve_is_bounded(values in proptest::collection::vec(0.0f64..1.0, 16), bits in proptest::collection::vec(any::<bool>(), 16)) {
        let mut bits = bits;
        bits[0] = true;
        let gt = Array2::from_shape_vec((4, 4), bits).unwrap();
        let map = Array2::from_shape_vec((4, 4), values).unwrap();
        let c = iou_curve(&map, &gt, 21).unwrap();
        prop_assert!(c.iou.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(c.thresholds.windows(2).all(|w| w[1] > w[0]));
        prop_assert!((0.0..=1.0).contains(&c.auc));
    }

    #[test]
    fn clip_score_ignores_embedding_scale(a in proptest::collection::vec(-1.0f64..1.0, 4), b in proptest::collection::vec(-1.0f64..1.0, 4), s in 0.1f64..10.0) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let texts = vec!["x".to_string()];
        let base = clip_score(&[img()], &texts, &Fixed(a.clone(), b.clone())).unwrap();
        let scaled = clip_score(&[img()], &texts, &Fixed(a.iter().map(|v| v * s).collect(), b)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
    }
}
