//! Scores one image against each category's descriptions and shows which
//! descriptions are kept and how they are weighted.

use sempt::alignment::{align_all, embed_descriptions, AlignConfig};
use sempt::bench::{generate_world, WorldSpec};
use sempt::encoder::{Encoder, EncoderConfig};
use sempt::numcore::tensor::dot;

fn main() -> sempt::Result<()> {
    let world = generate_world(&WorldSpec::default())?;
    let encoder = Encoder::<f32>::precomputed(EncoderConfig::default(), world.text_bank.clone())?;
    let emb = embed_descriptions(&world.knowledge.descriptions, &encoder)?;
    let image = &world.dataset.items[0];
    println!("image {} of {}", image.id, image.category);

    let cfg = AlignConfig::default();
    let aligned = align_all(&image.features, &emb, &cfg)?;
    for a in aligned.per_category.iter().take(4) {
        let name = &emb.categories()[a.category];
        let texts = world.knowledge.descriptions.get(name).unwrap_or_default();
        println!("\n{name}: similarity to aggregate {:.3}", dot(&image.features, &a.aggregate));
        for (j, s) in a.scores.iter().enumerate() {
            let w = a.selected.iter().position(|&x| x == j).map(|p| a.weights[p]);
            let mark = w.map_or("      ".to_string(), |w| format!("{w:.3} "));
            println!("  {mark}{s:+.3}  {}", texts[j]);
        }
    }
    Ok(())
}
