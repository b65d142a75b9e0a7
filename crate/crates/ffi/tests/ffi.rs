use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use kgreason::checkpoint;
use kgreason::eval::{evaluate, Protocol, Side};
use kgreason::kg::{generate_synthetic_kg, holdout_relation, RelationId};
use kgreason::pipeline::{run_pipeline, Dataset};
use kgreason::ModelConfig;
use kgreason_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut ds = Dataset::from_synthetic(generate_synthetic_kg(30, 4, 3, 5).unwrap());
    ds.save(&data).unwrap();
    let split = holdout_relation(&ds.kg, RelationId(0), 0.2, 5).unwrap();
    Dataset::save_split(&data, &split.to_manifest(5, "holdout", &ds.symbols)).unwrap();
    ds.split = Some(split);
    let mut config = ModelConfig::default();
    config.dim = 8;
    config.text.raw_dim = 64;
    config.stage1.epochs = 2;
    config.stage2.epochs = 2;
    let (_, model) = run_pipeline(&ds, &config).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    checkpoint::save(&model, &ckpt).unwrap();
    Fixture { _dir: dir, data, ckpt }
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(kg_last_error()) }.to_string_lossy().into_owned()
}

unsafe fn open(fx: &Fixture) -> (*mut KgDataset, *mut KgModel) {
    let mut ds = ptr::null_mut();
    assert_eq!(kg_dataset_load(cstr(&fx.data).as_ptr(), &mut ds), KgStatus::Ok, "{}", last_error());
    let mut model = ptr::null_mut();
    assert_eq!(kg_model_load(ds, cstr(&fx.ckpt).as_ptr(), &mut model), KgStatus::Ok, "{}", last_error());
    (ds, model)
}

#[test]
fn handles_match_the_library() {
    let fx = fixture();
    unsafe {
        let (ds, model) = open(&fx);
        let lib_ds = Dataset::load(&fx.data).unwrap();
        assert_eq!(kg_dataset_num_entities(ds), lib_ds.kg.num_entities());
        assert_eq!(kg_dataset_num_relations(ds), lib_ds.kg.num_relations());
        assert_eq!(kg_model_dim(model), 8);

        let t = lib_ds.split().unwrap().target_test[0];
        let name = lib_ds.symbols.entities.name(t.head.0).unwrap();
        let mut id = u32::MAX;
        assert_eq!(kg_dataset_entity_id(ds, CString::new(name).unwrap().as_ptr(), &mut id), KgStatus::Ok);
        assert_eq!(id, t.head.0);

        let mut needed = 0usize;
        assert_eq!(kg_dataset_entity_name(ds, id, ptr::null_mut(), 0, &mut needed), KgStatus::Ok);
        assert_eq!(needed, name.len() + 1);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(kg_dataset_entity_name(ds, id, buf.as_mut_ptr(), needed, &mut needed), KgStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), name);

        let state = checkpoint::load(&fx.ckpt).unwrap();
        let graph = kgreason::gnn::GraphIndex::new(&lib_ds.train_graph().unwrap());
        let scoring = state.scoring_model(&graph).unwrap();
        let mut s = 0.0;
        assert_eq!(kg_model_score(model, t.head.0, t.relation.0, t.tail.0, &mut s), KgStatus::Ok);
        assert_eq!(s, scoring.score(t.head.0 as usize, t.relation.0 as usize, t.tail.0 as usize));

        let mut v = vec![0.0; 8];
        assert_eq!(kg_model_entity_vector(model, t.head.0, v.as_mut_ptr(), v.len()), KgStatus::Ok);
        assert_eq!(v.as_slice(), scoring.entities.row(t.head.0 as usize));

        let mut m = KgMetrics::default();
        assert_eq!(
            kg_model_evaluate(model, ds, KgQuerySet::Target, KgProtocol::Filtered, KgSide::Both, &mut m),
            KgStatus::Ok
        );
        let split = lib_ds.split().unwrap();
        let r = evaluate(&scoring, &split.target_test, &lib_ds.known_all(), Protocol::Filtered, Side::Both).unwrap();
        assert_eq!(m.mrr, r.metrics.mrr);
        assert_eq!(m.hit10, r.metrics.hit10);
        assert_eq!(m.n_queries, r.metrics.n_queries);

        let n = kg_dataset_num_entities(ds);
        let mut ids = vec![0u32; n];
        let mut scores = vec![0.0; n];
        let mut len = 0usize;
        assert_eq!(
            kg_model_predict(model, ds, t.head.0, t.relation.0, KgDirection::Out, n, 0, ids.as_mut_ptr(), scores.as_mut_ptr(), &mut len),
            KgStatus::Ok
        );
        assert_eq!(len, n);
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n as u32).collect::<Vec<_>>());
        let lower = kg_model_lower_is_better(model) != 0;
        assert!(scores.windows(2).all(|w| if lower { w[0] <= w[1] } else { w[0] >= w[1] }));

        kg_model_free(model);
        kg_dataset_free(ds);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let fx = fixture();
    unsafe {
        let (ds, model) = open(&fx);
        let mut id = 0u32;
        let bogus = CString::new("no-such-entity").unwrap();
        assert_eq!(kg_dataset_entity_id(ds, bogus.as_ptr(), &mut id), KgStatus::Data);
        assert!(last_error().contains("no-such-entity"));

        assert_eq!(kg_dataset_entity_id(ds, ptr::null(), &mut id), KgStatus::InvalidArgument);
        assert!(last_error().contains("name"));

        let mut s = 0.0;
        assert_eq!(kg_model_score(model, u32::MAX, 0, 0, &mut s), KgStatus::Data);
        let mut v = [0.0; 2];
        assert_eq!(kg_model_entity_vector(model, 0, v.as_mut_ptr(), v.len()), KgStatus::InvalidArgument);

        let mut other = ptr::null_mut();
        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        assert_eq!(kg_model_load(ds, missing.as_ptr(), &mut other), KgStatus::Data);
        assert!(other.is_null());

        let garbage = fx.data.join("triples.tsv");
        assert_eq!(kg_model_load(ds, cstr(&garbage).as_ptr(), &mut other), KgStatus::Data);

        let mut none = ptr::null_mut();
        assert_eq!(kg_dataset_load(missing.as_ptr(), &mut none), KgStatus::Data);

        kg_model_free(model);
        kg_dataset_free(ds);
        kg_model_free(ptr::null_mut());
        kg_dataset_free(ptr::null_mut());
        assert_eq!(kg_dataset_num_entities(ptr::null()), 0);
    }
}

#[test]
fn header_compiles_as_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header_dir.join("kgreason.h").exists());
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"kgreason.h\"\n\
         int probe(const char *dir) {\n\
           KgDataset *ds = 0; KgModel *m = 0; KgMetrics met;\n\
           if (kg_dataset_load(dir, &ds) != KG_STATUS_OK) return 1;\n\
           if (kg_model_load(ds, \"x\", &m) != KG_STATUS_OK) { kg_dataset_free(ds); return 2; }\n\
           kg_model_evaluate(m, ds, KG_QUERY_SET_TARGET, KG_PROTOCOL_FILTERED, KG_SIDE_BOTH, &met);\n\
           kg_model_free(m); kg_dataset_free(ds);\n\
           return (int)met.n_queries + (kg_last_error() == 0);\n\
         }\n",
    )
    .unwrap();
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&header_dir)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
