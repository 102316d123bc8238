use misinfo_core::metrics::{accuracy, confusion_matrix, macro_f1, mean_iou, per_class_f1};
use misinfo_core::{region_iou, BBox, Category, Exact};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox<f64> {
    let x0 = rng.random_range(0.0..extent * 0.8);
    let y0 = rng.random_range(0.0..extent * 0.8);
    let x1 = rng.random_range(x0 + 0.5..=extent);
    let y1 = rng.random_range(y0 + 0.5..=extent);
    BBox::new(x0, y0, x1, y1).unwrap()
}

fn monte_carlo_iou(rng: &mut ChaCha8Rng, a: &[BBox<f64>], b: &[BBox<f64>], extent: f64, points: usize) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for _ in 0..points {
        let (x, y) = (rng.random_range(0.0..extent), rng.random_range(0.0..extent));
        let ina = a.iter().any(|r| r.contains(x, y));
        let inb = b.iter().any(|r| r.contains(x, y));
        inter += (ina && inb) as u64;
        union += (ina || inb) as u64;
    }
    inter as f64 / union as f64
}

#[test]
fn region_iou_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let a: Vec<_> = (0..rng.random_range(1..=4)).map(|_| random_box(&mut rng, 10.0)).collect();
        let b: Vec<_> = (0..rng.random_range(1..=4)).map(|_| random_box(&mut rng, 10.0)).collect();
        let exact = region_iou(&a, &b);
        let estimate = monte_carlo_iou(&mut rng, &a, &b, 10.0, 200_000);
        assert!((exact - estimate).abs() <= 1e-2, "exact {exact} estimate {estimate}");
    }
}

/// Integer boxes on a small grid: count covered unit cells directly.
fn raster_iou(a: &[[i64; 4]], b: &[[i64; 4]]) -> Exact {
    let covered =
        |boxes: &[[i64; 4]], x: i64, y: i64| boxes.iter().any(|r| r[0] <= x && x < r[2] && r[1] <= y && y < r[3]);
    let (mut inter, mut union) = (0i64, 0i64);
    for x in 0..12 {
        for y in 0..12 {
            let (ia, ib) = (covered(a, x, y), covered(b, x, y));
            inter += (ia && ib) as i64;
            union += (ia || ib) as i64;
        }
    }
    Ratio::new(inter, union)
}

fn int_box(rng: &mut ChaCha8Rng) -> [i64; 4] {
    let x0 = rng.random_range(0..11);
    let y0 = rng.random_range(0..11);
    [x0, y0, rng.random_range(x0 + 1..=12), rng.random_range(y0 + 1..=12)]
}

#[test]
fn exact_iou_matches_cell_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let ratio_box = |c: [i64; 4]| BBox::from_array(c.map(Ratio::from_integer)).unwrap();
    for _ in 0..500 {
        let a: Vec<_> = (0..rng.random_range(1..=4)).map(|_| int_box(&mut rng)).collect();
        let b: Vec<_> = (0..rng.random_range(1..=4)).map(|_| int_box(&mut rng)).collect();
        let ra: Vec<BBox<Exact>> = a.iter().copied().map(ratio_box).collect();
        let rb: Vec<BBox<Exact>> = b.iter().copied().map(ratio_box).collect();
        assert_eq!(region_iou(&ra, &rb), raster_iou(&a, &b));
    }
}

#[test]
fn single_rectangle_closed_form() {
    let r = |c: [i64; 4]| BBox::from_array(c.map(Ratio::from_integer)).unwrap();
    assert_eq!(region_iou(&[r([0, 0, 10, 10])], &[r([5, 5, 15, 15])]), Ratio::new(1, 7));
    assert_eq!(region_iou(&[r([0, 0, 10, 10])], &[r([0, 0, 10, 10])]), Ratio::from_integer(1));
    assert_eq!(region_iou(&[r([0, 0, 1, 1])], &[r([1, 1, 2, 2])]), Ratio::from_integer(0));
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Category> {
    (0..n).map(|_| Category::from_index(rng.random_range(0..Category::COUNT)).unwrap()).collect()
}

#[test]
fn classification_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let n = rng.random_range(1..60);
        let preds = random_labels(&mut rng, n);
        let gts = random_labels(&mut rng, n);
        let conf = confusion_matrix(&preds, &gts).unwrap();
        for g in Category::ALL {
            for p in Category::ALL {
                let count = preds.iter().zip(&gts).filter(|(pp, gg)| **pp == p && **gg == g).count() as u64;
                assert_eq!(conf[g.index()][p.index()], count);
            }
        }
        let trace: u64 = (0..Category::COUNT).map(|i| conf[i][i]).sum();
        assert_eq!(accuracy(&preds, &gts).unwrap(), trace as f64 / n as f64);

        let mut f1s = Vec::new();
        for c in Category::ALL {
            let tp = preds.iter().zip(&gts).filter(|(p, g)| **p == c && **g == c).count() as f64;
            let fp = preds.iter().zip(&gts).filter(|(p, g)| **p == c && **g != c).count() as f64;
            let fnn = preds.iter().zip(&gts).filter(|(p, g)| **p != c && **g == c).count() as f64;
            let expected = if tp + fp + fnn == 0.0 { None } else { Some(2.0 * tp / (2.0 * tp + fp + fnn)) };
            let got = per_class_f1(&conf)[c.index()];
            assert_eq!(got.is_some(), expected.is_some());
            if let (Some(g), Some(e)) = (got, expected) {
                assert!((g - e).abs() < 1e-12);
                f1s.push(e);
            }
        }
        let oracle = f1s.iter().sum::<f64>() / f1s.len() as f64;
        assert!((macro_f1(&preds, &gts).unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn mean_iou_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..n {
            let side = |rng: &mut ChaCha8Rng| -> Vec<BBox<f64>> {
                (0..rng.random_range(0..3)).map(|_| BBox::from_array(int_box(rng).map(|v| v as f64)).unwrap()).collect()
            };
            preds.push(side(&mut rng));
            gts.push(side(&mut rng));
        }
        let got = mean_iou(&preds, &gts).unwrap();
        let to_int = |v: &[BBox<f64>]| -> Vec<[i64; 4]> { v.iter().map(|b| b.to_array().map(|c| c as i64)).collect() };
        let terms: Vec<f64> = preds
            .iter()
            .zip(&gts)
            .filter(|(_, g)| !g.is_empty())
            .map(|(p, g)| {
                if p.is_empty() {
                    0.0
                } else {
                    let r = raster_iou(&to_int(p), &to_int(g));
                    *r.numer() as f64 / *r.denom() as f64
                }
            })
            .collect();
        assert_eq!(got.count, terms.len());
        if terms.is_empty() {
            assert!(got.vacuous);
        } else {
            assert!((got.value - terms.iter().sum::<f64>() / terms.len() as f64).abs() < 1e-12);
        }
    }
}
