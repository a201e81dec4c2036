// Temporary diagnostic: does the base model keep attribute class consistent
// with distant context?

use promptlab::corpus::Vocab;
use promptlab::model::{text_forward_input, LanguageModel};
use std::path::Path;

fn class_mass(logits: &[f64], vocab: &Vocab, words: &[&str]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    words
        .iter()
        .filter_map(|w| vocab.id_of(w))
        .map(|i| exps[i] / sum)
        .sum()
}

fn main() {
    let dir = Path::new(&std::env::args().nth(1).unwrap_or("/tmp/lab/run7".into())).to_path_buf();
    let vocab = Vocab::load(&dir.join("vocab.txt")).unwrap();
    let model = LanguageModel::load(&dir.join("model.bin")).unwrap();
    let pos = ["great","lovely","wonderful","delightful","charming","pleasant","superb","refreshing","splendid","cheerful"];
    let neg = ["awful","dreadful","terrible","gloomy","miserable","dismal","unpleasant","horrid","tedious","bleak"];
    let music = ["guitar","piano","violin","drums","melody","concert","chorus","trumpet","rhythm","orchestra"];
    let sport = ["match","stadium","race","team","goal","tournament","athlete","sprint","league","referee"];
    let weather = ["rain","thunder","breeze","frost","sunshine","clouds","storm","drizzle","snowfall","fog"];

    let cases = [
        ("no ctx -> sentiment slot", "the mood stayed", vec![("POS", &pos), ("NEG", &neg)]),
        ("POS ctx -> sentiment slot", "the outing felt great to everyone the mood stayed", vec![("POS", &pos), ("NEG", &neg)]),
        ("NEG ctx -> sentiment slot", "the outing felt awful to everyone the mood stayed", vec![("POS", &pos), ("NEG", &neg)]),
        ("no ctx -> topic slot", "we heard about the", vec![("MUS", &music), ("SPO", &sport), ("WEA", &weather)]),
        ("MUSIC ctx -> topic slot", "the guitar kept everyone busy we heard about the", vec![("MUS", &music), ("SPO", &sport), ("WEA", &weather)]),
        ("SPORT ctx -> topic slot", "the race kept everyone busy we heard about the", vec![("MUS", &music), ("SPO", &sport), ("WEA", &weather)]),
    ];
    for (name, ctx, classes) in cases {
        let mut ids = vec![promptlab::corpus::BOS_ID];
        ids.extend(vocab.encode(ctx));
        let input = text_forward_input(&model, &ids).unwrap();
        let logits = model.forward(&input).unwrap();
        let last = logits.row(logits.rows() - 1);
        let masses: Vec<String> = classes
            .iter()
            .map(|(label, words)| format!("{label}:{:.3}", class_mass(last, &vocab, *words)))
            .collect();
        println!("{name:32} {masses:?}");
    }
}
