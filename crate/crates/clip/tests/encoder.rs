use candle_core::{DType, Device};
use candle_nn::{VarBuilder, VarMap};
use candle_transformers::models::stable_diffusion::clip::{ClipTextTransformer, Config};
use crce_clip::{clip_dir_from_env, ClipTextEncoder, ClipTokenizer, ClipVariant, CONTEXT_LEN, EOS_TOKEN};
use crce_core::embedding::{
    compare_with_reference, EmbeddingError, Pooling, ReferenceTable, TextEncoder,
};
use tokenizers::models::wordlevel::WordLevel;
use tokenizers::pre_tokenizers::whitespace::Whitespace;
use tokenizers::processors::template::TemplateProcessing;
use tokenizers::Tokenizer;

const BOS: &str = "<|startoftext|>";

fn toy_tokenizer() -> Tokenizer {
    let vocab = [BOS, EOS_TOKEN, "<unk>", "a", "dog", "cat", "photo", "of"]
        .iter()
        .enumerate()
        .map(|(i, w)| (w.to_string(), i as u32))
        .collect();
    let model = WordLevel::builder().vocab(vocab).unk_token("<unk>".into()).build().unwrap();
    let mut tok = Tokenizer::new(model);
    tok.with_pre_tokenizer(Some(Whitespace {}));
    tok.with_post_processor(Some(
        TemplateProcessing::builder()
            .try_single(format!("{BOS} $A {EOS_TOKEN}"))
            .unwrap()
            .special_tokens(vec![(BOS, 0), (EOS_TOKEN, 1)])
            .build()
            .unwrap(),
    ));
    tok
}

#[test]
fn pads_with_eos_and_marks_its_position() {
    let t = ClipTokenizer::new(toy_tokenizer(), CONTEXT_LEN).unwrap();
    let p = t.encode("a photo of a dog").unwrap();
    assert_eq!(p.ids.len(), CONTEXT_LEN);
    assert_eq!(&p.ids[..7], &[0, 3, 6, 7, 3, 4, 1]);
    assert_eq!(p.eos_index, 6);
    assert!(p.ids[7..].iter().all(|&i| i == 1));
}

#[test]
fn long_prompts_are_rejected() {
    let t = ClipTokenizer::new(toy_tokenizer(), CONTEXT_LEN).unwrap();
    assert!(t.encode(&vec!["dog"; 75].join(" ")).is_ok());
    match t.encode(&vec!["dog"; 76].join(" ")) {
        Err(EmbeddingError::TokenLimit { tokens, limit }) => assert_eq!((tokens, limit), (78, 77)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_weights_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = ClipTextEncoder::load(dir.path(), ClipVariant::VitL14, Pooling::Eos, false).err().unwrap();
    assert!(matches!(err, EmbeddingError::EncoderUnavailable(ref m) if m.contains("model.safetensors")), "{err}");
}

#[test]
fn random_weights_give_unit_vectors_and_full_conditioning() {
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    let model = ClipTextTransformer::new(vb, &Config::v1_5()).unwrap();
    let tok = ClipTokenizer::new(toy_tokenizer(), CONTEXT_LEN).unwrap();
    let mut enc = ClipTextEncoder::from_parts(model, tok, Pooling::Eos, "random".into());
    let a = enc.encode_pooled("a dog").unwrap();
    assert_eq!(a.dim(), 768);
    assert!(a.is_normalized());
    assert_eq!(enc.encode_pooled("a dog").unwrap(), a);
    assert_ne!(enc.encode_pooled("a cat").unwrap(), a);
    let cond = enc.encode_conditioning("a dog").unwrap();
    assert_eq!(cond.shape(), &[77, 768]);
    // eos pooling is the normalized conditioning row at the end-of-text token
    let row = &cond.data()[3 * 768..4 * 768];
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (x, y) in row.iter().zip(a.values()) {
        assert!((x / n - y).abs() < 1e-6);
    }
    assert!(matches!(enc.encode_pooled(" "), Err(EmbeddingError::EmptyText)));
    assert_eq!(enc.encode_conditioning("").unwrap().shape(), &[77, 768]);
}

/// Runs only where real weights are installed; the acceptance suite reports
/// the outcome either way.
#[test]
fn reference_table_with_real_weights() {
    let Some(dir) = clip_dir_from_env() else {
        eprintln!("CRCE_CLIP_DIR not set; reference distances not checked here");
        return;
    };
    let mut enc = ClipTextEncoder::load(&dir, ClipVariant::VitL14, Pooling::Eos, false).unwrap();
    let table = ReferenceTable::dog();
    let report = table.reproduce(&mut enc, None).unwrap();
    let bad: Vec<_> = compare_with_reference(&report, &table).into_iter().filter(|c| !c.ok).collect();
    assert!(bad.is_empty(), "{bad:?}");
}
