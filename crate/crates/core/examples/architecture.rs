//! Parameter counts and block layout of every variant, plus the full layer
//! report of the multitask graph at the reference width.

use pgtnet::model::{build, ScalingPolicy, Variant};

fn main() -> pgtnet::Result<()> {
    for v in Variant::ALL {
        for ch in [16, v.default_channels()] {
            let g = build(v, ScalingPolicy::proposed(), ch)?;
            println!(
                "{:<20} width {:>2}: {:>2} blocks, {:>2} sigmoid, {:>9} parameters ({} in phase 1)",
                v.name(),
                ch,
                g.blocks.len(),
                g.sigmoid_blocks(),
                g.parameter_count(),
                g.phase1_parameter_count()
            );
        }
    }
    println!();
    print!(
        "{}",
        build(Variant::Block84Multitask, ScalingPolicy::proposed(), 64)?.describe()
    );
    Ok(())
}
