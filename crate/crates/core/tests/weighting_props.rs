use distillbev::attention::{combine_attention, normalize_attention, pool_abs_mean};
use distillbev::geometry::{rasterize_boxes, render_heatmap, BevBox, GridSpec, Heatmap};
use distillbev::region::{build_mask, compute_fp_cells, decompose, Region};
use distillbev::scaling::compute_scaling;
use distillbev::tensor::Tensor;
use proptest::prelude::*;

fn boxes_strategy() -> impl Strategy<Value = Vec<BevBox<f64>>> {
    prop::collection::vec(
        (
            -9.0..9.0f64,
            -9.0..9.0f64,
            0.3..6.0f64,
            0.3..3.0f64,
            -3.1..3.1f64,
            0usize..2,
        )
            .prop_map(|(x, y, l, w, yaw, k)| BevBox::new(x, y, l, w, yaw, k).unwrap()),
        0..8,
    )
}

fn teacher_strategy(cells: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![Just(0.0), 0.0..1.0f64, Just(0.1)],
        2 * cells * cells,
    )
}

fn scene() -> impl Strategy<Value = (GridSpec<f64>, Vec<BevBox<f64>>, Heatmap<f64>, Heatmap<f64>)> {
    (prop::sample::select(vec![4usize, 8, 16]), boxes_strategy()).prop_flat_map(|(cells, boxes)| {
        teacher_strategy(cells).prop_map(move |t| {
            let grid = GridSpec::centered(10.0, cells).unwrap();
            let gt = render_heatmap(&boxes, &grid, 2).unwrap();
            let teacher = Heatmap::new(Tensor::new(vec![2, cells, cells], t).unwrap()).unwrap();
            (grid, boxes.clone(), gt, teacher)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partition_is_consistent((grid, boxes, gt, teacher) in scene(), gamma in 0.05..0.9f64) {
        let owners = rasterize_boxes(&boxes, &grid);
        let fp = compute_fp_cells(&teacher, &gt, gamma).unwrap();
        let p = decompose(&owners, &fp, &teacher, gamma).unwrap();
        let t = teacher.max_over_classes();
        let g = gt.max_over_classes();
        let total: usize = [Region::TruePositive, Region::FalseNegative, Region::FalsePositive, Region::TrueNegative]
            .iter()
            .map(|&r| p.count(r))
            .sum();
        prop_assert_eq!(total, grid.num_cells());
        for i in 0..grid.num_cells() {
            let l = p.label[i];
            prop_assert_eq!(l.is_object(), owners.owner[i].is_some());
            match l {
                Region::TruePositive => prop_assert!(t.data()[i] > gamma),
                Region::FalseNegative => prop_assert!(t.data()[i] <= gamma),
                Region::FalsePositive => prop_assert!(t.data()[i] > gamma && g.data()[i] < gamma),
                Region::TrueNegative => prop_assert!(!(t.data()[i] > gamma && g.data()[i] < gamma)),
            }
        }
    }

    #[test]
    fn gt_as_teacher_never_mines_fp((grid, boxes, gt, _t) in scene(), gamma in 0.01..0.99f64) {
        let owners = rasterize_boxes(&boxes, &grid);
        let fp = compute_fp_cells(&gt, &gt, gamma).unwrap();
        prop_assert!(fp.iter().all(|&f| !f));
        let p = decompose(&owners, &fp, &gt, gamma).unwrap();
        prop_assert_eq!(p.count(Region::FalsePositive), 0);
    }

    #[test]
    fn mask_and_complement((grid, boxes, gt, teacher) in scene(), eta in 0.0..50.0f64, include_fp: bool) {
        let owners = rasterize_boxes(&boxes, &grid);
        let fp = compute_fp_cells(&teacher, &gt, 0.1).unwrap();
        let p = decompose(&owners, &fp, &teacher, 0.1).unwrap();
        let mask = build_mask(&p, eta, include_fp).unwrap();
        for i in 0..grid.num_cells() {
            let m = mask.m.data()[i];
            let want = match p.label[i] {
                Region::TruePositive | Region::FalseNegative => 1.0,
                Region::FalsePositive if include_fp => eta,
                _ => 0.0,
            };
            prop_assert_eq!(m, want);
            prop_assert_eq!(mask.m_bar.data()[i], if m == 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn scaling_region_sums((grid, boxes, gt, teacher) in scene()) {
        let owners = rasterize_boxes(&boxes, &grid);
        let fp = compute_fp_cells(&teacher, &gt, 0.1).unwrap();
        let p = decompose(&owners, &fp, &teacher, 0.1).unwrap();
        let s = compute_scaling(&p, &boxes, &grid).unwrap();
        for region in [Region::FalsePositive, Region::TrueNegative] {
            let n = p.count(region);
            let sum: f64 = (0..grid.num_cells()).filter(|&i| p.label[i] == region).map(|i| s.data()[i]).sum();
            if n > 0 {
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        prop_assert!(s.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn attention_sums_to_cell_count(
        vals in prop::collection::vec(0.0..10.0f64, 1..64),
        tau in 0.05..20.0f64,
    ) {
        let n = vals.len();
        let p = Tensor::new(vec![1, n], vals).unwrap();
        let a = normalize_attention(&p, tau).unwrap();
        prop_assert!((a.sum() - n as f64).abs() < 1e-9 * n as f64);
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        let c = combine_attention(&a, &a).unwrap();
        prop_assert_eq!(c, a);
    }

    #[test]
    fn attention_is_shift_invariant(
        vals in prop::collection::vec(0.0..5.0f64, 2..32),
        shift in 0.0..3.0f64,
    ) {
        let n = vals.len();
        let p = Tensor::new(vec![n, 1], vals).unwrap();
        let a = normalize_attention(&p, 0.5).unwrap();
        let b = normalize_attention(&p.map(|v| v + shift), 0.5).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }

    #[test]
    fn pooled_magnitude_ignores_sign(vals in prop::collection::vec(-3.0..3.0f64, 12)) {
        let f = Tensor::new(vec![3, 2, 2], vals).unwrap();
        let neg = f.map(|v| -v);
        prop_assert_eq!(pool_abs_mean(&f).unwrap(), pool_abs_mean(&neg).unwrap());
        prop_assert!(pool_abs_mean(&f).unwrap().data().iter().all(|&v| v >= 0.0));
    }
}
