use lmfusion_core::harness::corpus::{read_lines, read_manifest};
use lmfusion_core::harness::{gen_corpus, CorpusSizes, ToyTask};
use lmfusion_core::rnnlm::{lm_sequence_logprob, lm_step, lm_train, LmTrainConfig};
use lmfusion_core::seq2seq::{train_asr, AsrTrainConfig};
use lmfusion_core::{
    beam_search, Checkpoint, DecodeConfig, FusionKind, LoadedLm, LoadedModel, ModelConfig, ShallowLm, ToyTaskConfig,
    EOS, SOS,
};

fn corpus(dir: &std::path::Path) -> (ToyTask, lmfusion_core::harness::CorpusFiles) {
    let cfg = ToyTaskConfig {
        length: (3, 5),
        ..ToyTaskConfig::default()
    };
    let sizes = CorpusSizes {
        train: 16,
        dev: 4,
        eval: 2,
        lm_factor: 4,
    };
    let files = gen_corpus(&cfg, &sizes, dir).unwrap();
    (ToyTask::load(&files.task).unwrap(), files)
}

#[test]
fn lm_checkpoint_file_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (task, files) = corpus(dir.path());
    let mut cfg = LmTrainConfig::desk(task.vocab.len());
    cfg.epochs = 1;
    cfg.model.units = 8;
    let trained = lm_train(&read_lines(&files.lm_text).unwrap(), &task.vocab, &cfg).unwrap();
    let path = dir.path().join("lm.ckpt");
    trained.checkpoint.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = LoadedLm::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(loaded.lm.checkpoint(&loaded.store, &loaded.vocab).to_bytes(), bytes);

    let again = LoadedLm::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let seq = task.vocab.encode("abc").unwrap();
    let st = loaded.lm.initial_state();
    let (a, _, _) = lm_step(SOS, &st, &loaded.lm, &loaded.store).unwrap();
    let (b, _, _) = lm_step(SOS, &st, &again.lm, &again.store).unwrap();
    assert_eq!(a, b);
    let full = [seq, vec![EOS]].concat();
    let p = lm_sequence_logprob(&full, &loaded.lm, &loaded.store).unwrap();
    assert!(p < 0.0 && p.is_finite());
}

#[test]
fn fused_model_survives_the_checkpoint_handoff() {
    let dir = tempfile::tempdir().unwrap();
    let (task, files) = corpus(dir.path());
    let mut lm_cfg = LmTrainConfig::desk(task.vocab.len());
    lm_cfg.epochs = 1;
    lm_cfg.model.units = 8;
    let lm_ckpt = lm_train(&read_lines(&files.lm_text).unwrap(), &task.vocab, &lm_cfg).unwrap().checkpoint;
    let lm = LoadedLm::from_checkpoint(&lm_ckpt).unwrap();

    let train = task.utterances(&read_manifest(&files.train).unwrap()).unwrap();
    let dev = task.utterances(&read_manifest(&files.dev).unwrap()).unwrap();
    let mut model = ModelConfig::desk(task.config.feat_dim, task.vocab.len(), FusionKind::Ccf2);
    model.enc_layers = 1;
    model.enc_units = 6;
    model.enc_proj = 6;
    model.dec_units = 6;
    let mut cfg = AsrTrainConfig::desk(model);
    cfg.epochs = 2;
    let r = train_asr(&train, &dev, &task.vocab, Some(&lm), None, &cfg).unwrap();
    assert_eq!(r.log.len(), 2);
    assert!((1..=2).contains(&r.best_epoch));

    let path = dir.path().join("ccf2.ckpt");
    r.checkpoint.save(&path).unwrap();
    let loaded = LoadedModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(loaded.model.config, r.model.config);
    assert_eq!(loaded.vocab, task.vocab);
    let dc = DecodeConfig {
        beam: 3,
        nbest: 3,
        ..DecodeConfig::default()
    };
    let sl = ShallowLm {
        lm: &lm.lm,
        store: &lm.store,
    };
    for u in &dev {
        let a = beam_search(&r.model, &r.store, Some(sl), &dc, &u.feats).unwrap();
        let b = beam_search(&loaded.model, &loaded.store, Some(sl), &dc, &u.feats).unwrap();
        assert_eq!(a.best.tokens, b.best.tokens);
        assert_eq!(a.best.score.to_bits(), b.best.score.to_bits());
        for w in a.nbest.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        assert!(a.nbest.iter().all(|h| h.is_final() && h.labels().len() <= dc.max_len(u.feats.shape()[0])));
    }
}
