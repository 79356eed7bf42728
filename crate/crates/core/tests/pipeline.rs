use std::io::Write;

use collapsim::dynamics::{run_ensemble, write_checkpoint_csv, Checkpoints, Solver, TrajectoryProblem};
use collapsim::ensemble::EnsembleConfig;
use collapsim::hilbert::{CommutingSet, DensityMatrix, StateVector};
use collapsim::kernels::{CorrelationKernel, LagTable};
use collapsim::macrobody::{macro_damping_rate, MacroBody, MacroParams};
use collapsim::master::{
    decay_report, ensemble_to_density, evolve_colored_master, offdiag_analytic, DensityMode, DEFAULT_BATCHES,
};
use collapsim::noise::{NoiseModel, Proposal, TimeGrid};

#[test]
fn tabulated_kernel_from_file_drives_master_and_ensemble() {
    let tau = 0.4;
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "lag,value").unwrap();
    for k in 0..=4000 {
        let u = k as f64 * 20.0 * tau / 4000.0;
        writeln!(file, "{u},{}", (-u / tau).exp() / (2.0 * tau)).unwrap();
    }
    file.flush().unwrap();
    let tab = CorrelationKernel::tabulated(0.6, LagTable::from_csv_path(file.path()).unwrap()).unwrap();
    let exact = CorrelationKernel::exponential(0.6, tau).unwrap();

    let set = CommutingSet::single(&[1.0, -1.0]).unwrap();
    let psi0 = StateVector::from_real(&[0.6, 0.8]).unwrap();
    let rho0 = DensityMatrix::pure(&psi0).unwrap();
    let grid = TimeGrid::new(0.0, 2.0, 40).unwrap();
    let nodes: Vec<usize> = (0..=40).step_by(10).collect();
    let path = evolve_colored_master(&set, &rho0, &grid, &tab, 0.0, &nodes).unwrap();
    for (t, rho) in path.times.iter().zip(&path.rhos) {
        let own = 0.48 * offdiag_analytic(&set, &tab, 0, 1, *t, 0.0).unwrap();
        let closed = 0.48 * offdiag_analytic(&set, &exact, 0, 1, *t, 0.0).unwrap();
        assert!((rho[(0, 1)].re / own - 1.0).abs() < 1e-8);
        // linear interpolation of the table costs O(h²)
        assert!((own / closed - 1.0).abs() < 1e-5);
    }

    let problem = TrajectoryProblem {
        set: set.clone(),
        psi0,
        model: NoiseModel::new(grid, &tab, 1).unwrap(),
        solver: Solver::ColoredCommuting { kernel: tab.clone(), h: None },
        checkpoints: Checkpoints::even(&grid, 5),
        proposal: Proposal::Raw,
    };
    let recs = run_ensemble(&problem, &EnsembleConfig::new(4000, 17, 2)).unwrap();
    let est = ensemble_to_density(&recs, DensityMode::Cooked, DEFAULT_BATCHES).unwrap();
    let report = decay_report(&est, &set, &tab, &rho0, 0, 1, 0.0).unwrap();
    assert!(report.max_sigmas() < 5.0, "{report:?}");
}

#[test]
fn checkpoint_csv_reads_back() {
    let set = CommutingSet::single(&[1.0, 0.0, -1.0]).unwrap();
    let psi0 = StateVector::from_real(&[0.6, 0.48, 0.64]).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let kernel = CorrelationKernel::gaussian(1.0, 0.2).unwrap();
    let problem = TrajectoryProblem {
        set: set.clone(),
        psi0,
        model: NoiseModel::new(grid, &kernel, 1).unwrap(),
        solver: Solver::ColoredCommuting { kernel, h: None },
        checkpoints: Checkpoints::even(&grid, 3),
        proposal: Proposal::Raw,
    };
    let recs = run_ensemble(&problem, &EnsembleConfig::new(50, 3, 1)).unwrap();
    let mut buf = Vec::new();
    write_checkpoint_csv(&recs, &set, &mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["trajectory", "t", "weight", "p_1", "p_2", "p_3", "dominant_outcome"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 50 * 3);
    for (n, row) in rows.iter().enumerate() {
        let (traj, k) = (n / 3, n % 3);
        assert_eq!(row[0].parse::<usize>().unwrap(), traj);
        let p: Vec<f64> = (3..6).map(|c| row[c].parse().unwrap()).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let dominant: usize = row[6].parse().unwrap();
        assert!(p.iter().all(|&q| q <= p[dominant]));
        assert_eq!(row[2].parse::<f64>().unwrap(), recs[traj].weight(k));
    }
}

#[test]
fn macro_body_from_file_matches_lattice() {
    let p = MacroParams::default();
    let spacing = 10.0 / p.alpha.sqrt();
    let lattice = MacroBody::cubic_lattice(27, spacing).unwrap();
    let mut text = String::from("i,qx,qy,qz\n");
    for (i, q) in lattice.offsets().iter().enumerate() {
        text.push_str(&format!("{i},{},{},{}\n", q[0], q[1], q[2]));
    }
    let body = MacroBody::from_csv_reader(text.as_bytes()).unwrap();
    let dq = [1e-3, 0.0, 0.0];
    let a = macro_damping_rate(&body, [0.0; 3], dq, 1.0, &p).unwrap();
    let b = macro_damping_rate(&lattice, [0.0; 3], dq, 1.0, &p).unwrap();
    assert!((a / b - 1.0).abs() < 1e-14);
    assert!((a / (27.0 * p.lambda) - 1.0).abs() < 1e-9);
}
