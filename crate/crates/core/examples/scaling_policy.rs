//! Residual scaling factors of the block-84 multitask graph under the proposed
//! and all-positive policies, listed by branch and stage.

use pgtnet::model::{build, epsilon, Branch, ScalingPolicy, Variant};

fn main() -> pgtnet::Result<()> {
    println!(
        "proposed schedule: ε(15) = {:+.2}, ε(24) = {:+.2}, ε(30) = {:+.2}",
        epsilon(&ScalingPolicy::proposed(), 15),
        epsilon(&ScalingPolicy::proposed(), 24),
        epsilon(&ScalingPolicy::proposed(), 30)
    );
    for (name, policy) in [
        ("proposed", ScalingPolicy::proposed()),
        ("all_positive 61", ScalingPolicy::all_positive(61.0)),
        ("all_positive 85", ScalingPolicy::all_positive(85.0)),
    ] {
        let g = build(Variant::Block84Multitask, policy, 16)?;
        println!("\n{name}");
        for branch in [Branch::Shared, Branch::Binary, Branch::Main] {
            let blocks: Vec<_> = g.blocks.iter().filter(|b| b.branch == branch).collect();
            let (first, last) = (blocks[0], blocks[blocks.len() - 1]);
            let min = blocks
                .iter()
                .map(|b| b.epsilon)
                .fold(f64::INFINITY, f64::min);
            println!(
                "  {:<7} stages {:>2}..={:<2}  ε {:+.2} .. {:+.2}  (min {:+.2})",
                format!("{branch:?}").to_lowercase(),
                first.stage,
                last.stage,
                first.epsilon,
                last.epsilon,
                min
            );
        }
    }
    Ok(())
}
