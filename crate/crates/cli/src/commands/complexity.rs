//! `complexity`: per-layer parameter and MAC accounting.

use clap::Args;

use gsecnet_core::model::GsecNet;

use crate::config::RunConfig;
use crate::{data, CliError};

#[derive(Args)]
pub struct ComplexityArgs {
    /// Emit the table as JSON instead of aligned text.
    #[arg(long)]
    pub json: bool,
}

pub fn run(config: &RunConfig, args: &ComplexityArgs) -> Result<(), CliError> {
    let mut net = GsecNet::<f32>::new(config.model_config(), config.seed).map_err(data)?;
    let report = net.complexity();
    let (encoder, unet) = net.complexity_split();
    if args.json {
        let layers: Vec<_> = report
            .entries
            .iter()
            .map(|e| {
                serde_json::json!({
                    "name": e.name,
                    "params": e.params,
                    "macs": e.macs,
                })
            })
            .collect();
        let json = serde_json::json!({
            "layers": layers,
            "encoder": { "params": encoder.0, "macs": encoder.1 },
            "unet": { "params": unet.0, "macs": unet.1 },
            "total": { "params": report.total_params(), "macs": report.total_macs() },
            "config_hash": format!("{:016x}", config.hash()),
        });
        println!("{json}");
    } else {
        print!("{}", report.table());
        println!(
            "encoder subtotal: {} params, {} macs",
            encoder.0, encoder.1
        );
        println!("u-net subtotal: {} params, {} macs", unet.0, unet.1);
        println!(
            "total: {:.3}M params, {:.3}G macs",
            report.total_params() as f64 / 1e6,
            report.total_macs() as f64 / 1e9
        );
        println!("config hash: {:016x}", config.hash());
    }
    Ok(())
}
