use phonon_kinetics::*;
use proptest::prelude::*;
use std::sync::OnceLock;

const N: usize = 6;

fn setup() -> &'static (ModeSet64, TripleList64) {
    static S: OnceLock<(ModeSet64, TripleList64)> = OnceLock::new();
    S.get_or_init(|| {
        let m = ModeSet::new(DispersionModel::NextNearestPaper { omega0: 1.0 }, BrillouinGrid::new(N).unwrap()).unwrap();
        let eta = m.model().default_delta_width(&m.grid());
        let t = build_triples(&m, eta, 5.0, PrefactorKind::OnSite).unwrap();
        (m, t)
    })
}

fn field() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..3.0, N * N * N)
}

fn stats() -> impl Strategy<Value = Statistics> {
    prop_oneof![Just(Statistics::Classical), Just(Statistics::Quantum)]
}

fn params() -> CollisionParams64 {
    CollisionParams::from_gamma(0.8, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conservative_kernel_keeps_energy(v in field(), s in stats()) {
        let (m, t) = setup();
        let w = Occupation::new(m.grid(), v, s).unwrap();
        let c = collide_conservative(&w, t, &params()).unwrap();
        let flow: f64 = c.iter().zip(m.omega()).map(|(a, b)| (a * b).abs()).sum();
        let net: f64 = c.iter().zip(m.omega()).map(|(a, b)| a * b).sum();
        prop_assert!(net.abs() <= 1e-12 * flow.max(1e-300), "{net} vs {flow}");
    }

    #[test]
    fn entropy_never_decreases(v in field(), s in stats()) {
        let (m, t) = setup();
        let w = Occupation::new(m.grid(), v, s).unwrap();
        for k in [Kernel::Conservative, Kernel::Raw] {
            let p = entropy_production(&w, t, &params(), k).unwrap();
            prop_assert!(p >= 0.0, "{k:?}: {p}");
        }
    }

    #[test]
    fn isotope_scattering_keeps_number(v in field(), var in 0.01f64..1.0) {
        let (m, _) = setup();
        let eta = m.model().default_delta_width(&m.grid());
        let k = IsotopeKernel::build(m, var, eta, 5.0).unwrap();
        let w = Occupation::new(m.grid(), v, Statistics::Classical).unwrap();
        let c = collide_isotope(&w, &k).unwrap();
        let scale: f64 = c.iter().map(|x| x.abs()).sum();
        prop_assert!(c.iter().sum::<f64>().abs() <= 1e-12 * scale.max(1e-300));
    }

    #[test]
    fn grid_addition_inverts(i in 0usize..N * N * N, j in 0usize..N * N * N) {
        let g = BrillouinGrid::new(N).unwrap();
        prop_assert_eq!(g.sub(g.add(i, j), j), i);
        prop_assert_eq!(g.add(i, g.neg(i)), g.index([0, 0, 0]));
    }
}

#[test]
fn triples_close_under_exchange() {
    let (m, t) = setup();
    assert!(!t.is_empty());
    for e in t.entries() {
        let s = t.find(e.j as usize, e.i as usize).expect("swapped triple");
        assert_eq!(s.l, e.l);
        assert_eq!(s.weight, e.weight);
        assert_eq!(m.grid().add(e.i as usize, e.j as usize), e.l as usize);
    }
}

#[test]
fn equilibria_are_fixed_points() {
    let (m, t) = setup();
    for s in [Statistics::Classical, Statistics::Quantum] {
        let w = m.equilibrium(0.7, s).unwrap();
        let scale = w.values().iter().cloned().fold(0.0, f64::max);
        let c = collide_conservative(&w, t, &params()).unwrap();
        assert!(c.iter().all(|x| x.abs() < 1e-12 * scale * scale), "{s:?}");
    }
}

#[test]
fn occupation_csv_round_trips() {
    let (m, _) = setup();
    let w = m.equilibrium(1.3, Statistics::Quantum).unwrap();
    let text = w.to_csv();
    assert!(!text.contains('\r'));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k1,k2,k3,W"));
    let back: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(back, w.values());
}

#[test]
fn single_precision_tracks_double() {
    let g = BrillouinGrid::new(4).unwrap();
    let m64 = ModeSet::new(DispersionModel::NextNearestPaper { omega0: 1.0 }, g).unwrap();
    let m32 = ModeSet::new(DispersionModel::NextNearestPaper { omega0: 1.0f32 }, g).unwrap();
    let eta = m64.model().default_delta_width(&g);
    let t64 = build_triples(&m64, eta, 5.0, PrefactorKind::OnSite).unwrap();
    let t32: TripleList32 = build_triples(&m32, eta as f32, 5.0, PrefactorKind::OnSite).unwrap();
    let v: Vec<f64> = (0..g.len()).map(|i| 0.5 + (i % 7) as f64 * 0.2).collect();
    let w64 = Occupation::new(g, v.clone(), Statistics::Classical).unwrap();
    let w32: Occupation32 = Occupation::new(g, v.iter().map(|&x| x as f32).collect(), Statistics::Classical).unwrap();
    let c64 = collide_conservative(&w64, &t64, &CollisionParams::from_gamma(1.0, 1.0).unwrap()).unwrap();
    let c32 = collide_conservative(&w32, &t32, &CollisionParams::from_gamma(1.0f32, 1.0).unwrap()).unwrap();
    let scale = c64.iter().map(|x| x.abs()).fold(0.0, f64::max);
    for (a, b) in c64.iter().zip(&c32) {
        assert!((a - *b as f64).abs() < 1e-4 * scale);
    }
}
