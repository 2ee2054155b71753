use plaindet::decoder::{BiasVariant, PipelineConfig};
use plaindet::Model;

fn main() -> plaindet::Result<()> {
    let cfg = PipelineConfig {
        bias: BiasVariant::Decomposed,
        ..PipelineConfig::toy()
    };
    let model = Model::new(cfg, 0)?;
    let image = vec![0.5; 64 * 64];
    for p in model.predict(&image)? {
        println!("class {} score {:.3} box {:?}", p.class, p.score, p.bbox);
    }
    Ok(())
}
