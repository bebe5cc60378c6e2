//! Print the default six-step hybrid plan and the two underlying grids.

use editedid::schedule::{ddim_grid, dpm_grid, hybrid_grid, IndexConvention};

fn main() -> editedid::Result<()> {
    println!("ddim grid {:?}", ddim_grid(6)?.values);
    println!("dpm  grid {:?}", dpm_grid(6)?.values);
    let plan = hybrid_grid(6, 1, 3, IndexConvention::FromData)?;
    print!("{}", plan.to_csv());
    match hybrid_grid(6, 1, 3, IndexConvention::FromNoise) {
        Ok(_) => println!("from_noise splice accepted"),
        Err(e) => println!("from_noise splice rejected: {e}"),
    }
    Ok(())
}
