// The eight-panel MES vs GD study at desk scale (d = 200, k = 5).
// Pass a trial count as the first argument; the default is one trial.

use slm_mes::harness::{reproduce_figure1, Scale};

pub fn run_example() -> slm_mes::Result<()> {
    let trials = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1);
    let report = reproduce_figure1(Scale::Desk, trials, 0)?;
    for p in &report.panels {
        println!("({}) {}", p.name, p.title);
        for s in &p.series {
            println!("    {:<10} final eps {:.2e}", s.label, s.final_eps);
        }
        for note in &p.notes {
            println!("    {note}");
        }
    }
    for path in report.write(&std::env::temp_dir().join("slm-figure1"))? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> slm_mes::Result<()> {
    run_example()
}
