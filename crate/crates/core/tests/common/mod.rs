//! Fleet helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::thread;

use edgedash::analysis::AnalysisConfig;
use edgedash::config::{DashCamSection, HardwareSection, MasterConfig, RunSection, WorkerConfig};
use edgedash::ledger::{EventKind, Ledger};
use edgedash::model::HardwareInfo;
use edgedash::node::{run_worker, Master, MasterReport, WorkerSummary};
use edgedash::workload::{generate, write_catalog, ContentSpec, GenSpec};

pub fn catalog(dir: &Path, pairs: usize, duration_ms: u64, fps: u32, seed: u64) -> PathBuf {
    let spec = GenSpec {
        pairs,
        duration_ms,
        fps,
        width: 1280,
        height: 720,
        seed,
        output_dir: dir.to_path_buf(),
        content: ContentSpec::default(),
    };
    write_catalog(dir, &generate(&spec).unwrap()).unwrap();
    dir.to_path_buf()
}

pub fn analysis(esd: f64, frame_cost_ms: f64) -> AnalysisConfig {
    AnalysisConfig { esd, frame_cost_ms, ..AnalysisConfig::default() }
}

pub struct Fleet {
    pub master: MasterConfig,
    pub workers: Vec<WorkerConfig>,
}

impl Fleet {
    pub fn new(master_name: &str, hw: HardwareInfo, catalog_dir: &Path, out: &Path) -> Self {
        Fleet {
            master: MasterConfig {
                name: master_name.into(),
                listen: "127.0.0.1:0".into(),
                expected_workers: 0,
                worker_wait_ms: 20_000,
                output_dir: out.to_path_buf(),
                chunk_size: 32 * 1024,
                hardware: HardwareSection::from_info(hw),
                dashcam: DashCamSection {
                    catalog_dir: Some(catalog_dir.to_path_buf()),
                    simulated_download_ms: 350,
                    ..DashCamSection::default()
                },
                run: RunSection { pairs: 2, ..RunSection::default() },
                analysis: analysis(0.0, 5.0),
            },
            workers: Vec::new(),
        }
    }

    pub fn worker(mut self, name: &str, hw: HardwareInfo, cfg: AnalysisConfig) -> Self {
        self.workers.push(WorkerConfig {
            name: name.into(),
            master: String::new(),
            connect_timeout_ms: 10_000,
            chunk_size: 32 * 1024,
            hardware: HardwareSection::from_info(hw),
            analysis: cfg,
        });
        self.master.expected_workers = self.workers.len();
        self
    }

    pub fn run(self) -> (MasterReport, Vec<WorkerSummary>) {
        let master = Master::bind(self.master).unwrap();
        let addr = master.local_addr().to_string();
        let handles: Vec<_> = self
            .workers
            .into_iter()
            .map(|mut w| {
                w.master = addr.clone();
                thread::spawn(move || run_worker(&w).unwrap())
            })
            .collect();
        let report = master.run().unwrap();
        let workers = handles.into_iter().map(|h| h.join().unwrap()).collect();
        (report, workers)
    }
}

/// (start, end) of the transfer interval of each of `units`, sorted.
pub fn transfer_intervals(ledger: &Ledger, units: &[String]) -> Vec<(u64, u64)> {
    let mut v: Vec<(u64, u64)> = units
        .iter()
        .filter_map(|u| {
            let s = ledger.find(u, EventKind::TransferStart)?;
            let e = ledger.find(u, EventKind::TransferEnd)?;
            Some((s.t_ms, e.t_ms))
        })
        .collect();
    v.sort();
    v
}
