//! Plans a small dataset, writes it to a temporary directory and reads one
//! episode back.

use patchicl::data::{ClassSplit, DataConfig, Dataset, DatasetManifest, Split};

fn main() -> patchicl::Result<()> {
    let manifest = DatasetManifest::plan(7, 32, 16, 0.25, ClassSplit::default(), DataConfig::default())?;
    let dir = std::env::temp_dir().join("patchicl-example-data");
    let ds = Dataset::write(&dir, manifest, 1)?;
    println!("{} train / {} held-out episodes in {}", ds.manifest.count(Split::Train), ds.manifest.count(Split::HeldOut), dir.display());
    let first = ds.manifest.entries(Split::HeldOut).next().expect("held-out episode");
    let ep = ds.load(first)?;
    let fg = ep.target_mask.sum();
    println!("episode {} ({}) has {fg} foreground pixels and {} context pairs", ep.episode_id, ep.class, ep.context.len());
    println!("{}", ds.manifest.to_text().lines().take(12).collect::<Vec<_>>().join("\n"));
    Ok(())
}
