use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use privpf::collect::{collect_dataset, CollectOptions, DsoAgent, SmAgent, TransportKind};
use privpf::commit::{setup, Realization};
use privpf::drift::{drift_indicator, PoolMode};
use privpf::feeder::{
    build_admittance, generate_profiles, solve_power_flow, Bus, BusKind, FeederModel, Line, LoadProfile, NewtonOptions, Season,
};
use privpf::lrs::{sample_meter_params, transform_profile, BoundsConfig};

fn random_radial(n: usize, rng: &mut ChaCha8Rng) -> FeederModel {
    let buses = (0..n).map(|id| Bus { id, kind: if id == 0 { BusKind::Slack } else { BusKind::Pq } }).collect();
    let lines = (1..n)
        .map(|to| Line { from: rng.random_range(0..to), to, r: rng.random_range(0.002..0.02), x: rng.random_range(0.001..0.01) })
        .collect();
    FeederModel::new(buses, lines).unwrap()
}

#[test]
fn voltage_falls_as_load_grows_on_random_radial_feeders() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let n = rng.random_range(3..12);
        let feeder = random_radial(n, &mut rng);
        let y = build_admittance(&feeder).unwrap();
        let ids = feeder.load_bus_ids();
        let base_p = Array2::from_shape_fn((1, ids.len()), |_| rng.random_range(0.0..0.02));
        let base_q = base_p.mapv(|p| p * 0.33);
        let mut prev: Option<Array2<f64>> = None;
        for step in 0..6 {
            let k = step as f64 * 0.4;
            let prof = LoadProfile::new(ids.clone(), 15, &base_p * k, &base_q * k).unwrap();
            let st = solve_power_flow(&feeder, &y, &prof, &NewtonOptions::default()).unwrap();
            let v = st.magnitudes_for(&ids).unwrap();
            if let Some(p) = &prev {
                for (a, b) in v.iter().zip(p) {
                    assert!(*a <= *b + 1e-12, "voltage rose with load: {a} > {b}");
                }
            }
            prev = Some(v);
        }
    }
}

#[test]
fn collected_voltages_equal_measured_through_randomized_inputs() {
    let feeder = FeederModel::radial(8, 3).unwrap();
    let y = build_admittance(&feeder).unwrap();
    let profile = generate_profiles(7, 96, 15, 4, Season::Autumn).unwrap();
    let params = sample_meter_params(&profile.bus_ids, &BoundsConfig::default(), 5).unwrap();
    let masked = transform_profile(&profile, &params).unwrap();
    assert_eq!(masked.p.dim(), profile.p.dim());

    let st = solve_power_flow(&feeder, &y, &profile, &NewtonOptions::default()).unwrap();
    let v = st.magnitudes_for(&profile.bus_ids).unwrap();
    let sms: Vec<SmAgent> = profile
        .bus_ids
        .iter()
        .enumerate()
        .map(|(j, &id)| SmAgent::new(id, v.column(j).to_vec(), 8, 2, 40 + j as u64).unwrap())
        .collect();
    let dso = DsoAgent::new(setup(Realization::ToyModp, 6).unwrap(), 7);
    for transport in [TransportKind::Channel, TransportKind::Tcp { port: 0 }] {
        let opts = CollectOptions { transport, chunk_rows: 10, ..CollectOptions::default() };
        let data = collect_dataset(&sms, &dso, 96, &opts).unwrap();
        assert!(!data.partial);
        assert_eq!(data.voltages, v);
    }
}

#[test]
fn seasonal_pools_are_further_apart_than_same_season_pools() {
    let feeder = FeederModel::radial(15, 1).unwrap();
    let y = build_admittance(&feeder).unwrap();
    let pool = |season, seed| {
        let prof = generate_profiles(14, 960, 15, seed, season).unwrap();
        solve_power_flow(&feeder, &y, &prof, &NewtonOptions::default()).unwrap().magnitudes_for(&prof.bus_ids).unwrap()
    };
    let winter = pool(Season::Winter, 1);
    let summer = pool(Season::Summer, 2);
    let winter2 = pool(Season::Winter, 3);
    let cross = drift_indicator(winter.view(), summer.view(), 5, PoolMode::Flattened).unwrap();
    let same = drift_indicator(winter.view(), winter2.view(), 5, PoolMode::Flattened).unwrap();
    assert!(cross.tt > 0.0);
    assert!(cross.tt > same.tt);
    let per_node = drift_indicator(winter.view(), summer.view(), 5, PoolMode::PerNode).unwrap();
    assert!(per_node.tt > 0.0);
}
