//! Passkey needle-in-a-haystack grid against the offline needle-extracting
//! model, once with room to spare and once squeezed into a 4K window.
//! Writes `niah_grid.csv` and an SVG heatmap to a temp directory.

use lcl::bench::{Harness, RunConfig};
use lcl::gateway::{PromptMode, TruncationStrategy, WindowPolicy};
use lcl::niah::{self, NiahVariant};

fn main() -> lcl::Result<()> {
    let harness = Harness::offline(None)?;
    let (lengths, depths) = niah::default_grid(16_384, 5, 10);
    let cases = niah::make_standard_cases(NiahVariant::Passkey, &lengths, &depths)?;
    let filler = vec![niah::synthetic_filler(20_000, 0, &harness.tokenizer)];

    for window in [131_072, 4096] {
        let cfg =
            RunConfig::full_context(WindowPolicy::new(window, TruncationStrategy::DropMiddle));
        let run = niah::run_grid(&cases, &filler, &cfg, PromptMode::Full, &harness)?;
        println!(
            "window {window}: mean score {:.3}",
            run.grid.mean().unwrap_or(0.0)
        );
        for (len, row) in run.grid.lengths.iter().zip(&run.grid.scores) {
            let cells: String = row
                .iter()
                .map(|s| match s {
                    Some(v) if *v > 0.5 => '#',
                    Some(_) => '.',
                    None => '?',
                })
                .collect();
            println!("  {len:>6} {cells}");
        }
        if window == 4096 {
            let dir = std::env::temp_dir().join("lcl-niah-example");
            std::fs::create_dir_all(&dir).map_err(|e| lcl::Error::Data(e.to_string()))?;
            std::fs::write(dir.join("niah_grid.csv"), run.grid.to_csv()?)
                .map_err(|e| lcl::Error::Data(e.to_string()))?;
            std::fs::write(
                dir.join("niah_grid.svg"),
                run.grid.to_svg("passkey, 4K window"),
            )
            .map_err(|e| lcl::Error::Data(e.to_string()))?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}
