use nigdate::data::{build_corpus, default_codices, render_page, CorpusBuildConfig, FadingField, Quadrant};
use nigdate::evaluation::spatial_uncertainty_map;
use nigdate::training::{train, HeadKind, TrainConfig, TrainData};

const SIDE: usize = 672;
const WINDOW: usize = 224;
const STRIDE: usize = 56;

/// Window classification against the faded quadrant: (entirely inside, entirely clear).
fn placement(q: Quadrant, row: usize, col: usize) -> (bool, bool) {
    let half = SIDE / 2;
    let (y0, x0) = (row * STRIDE, col * STRIDE);
    let (right, below) = (x0 >= half, y0 >= half);
    let (left, above) = (x0 + WINDOW <= half, y0 + WINDOW <= half);
    match q {
        Quadrant::TopLeft => (left && above, right || below),
        Quadrant::TopRight => (right && above, left || below),
        Quadrant::BottomLeft => (left && below, right || above),
        Quadrant::BottomRight => (right && below, left || above),
    }
}

#[test]
fn faded_quadrant_raises_aleatoric() {
    let (corpus, _) = build_corpus(&CorpusBuildConfig::default()).unwrap();
    let cfg = TrainConfig {
        model_kind: HeadKind::Evidential,
        ..TrainConfig::default()
    };
    let data = TrainData::from_corpus(&corpus, cfg.extractor.input_side).unwrap();
    let model = train(&data, &cfg).unwrap().model;

    let quadrants = [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (k, codex) in default_codices().iter().enumerate() {
        for (qi, &quadrant) in quadrants.iter().enumerate() {
            let year = 0.5 * (codex.years.0 + codex.years.1);
            let field = FadingField::Quadrant {
                base: 0.0,
                faded: 0.75,
                quadrant,
            };
            let page = render_page(codex, year, &field, SIDE, 900 + (4 * k + qi) as u64);
            let map = spatial_uncertainty_map(&model, &page.pixels, SIDE, SIDE, WINDOW, STRIDE).unwrap();
            assert_eq!((map.rows, map.cols), (9, 9));
            for r in 0..map.rows {
                for c in 0..map.cols {
                    match placement(quadrant, r, c) {
                        (true, _) => inside.push(map.aleatoric_std_years[r][c]),
                        (_, true) => outside.push(map.aleatoric_std_years[r][c]),
                        _ => {}
                    }
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(inside.len(), 12 * 9);
    assert!(
        mean(&inside) > mean(&outside),
        "faded {:.2} vs clear {:.2}",
        mean(&inside),
        mean(&outside)
    );
}
