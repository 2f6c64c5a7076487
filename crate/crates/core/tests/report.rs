use proptest::prelude::*;
use voxlesion::evaluation::{Level, MetricPanel};
use voxlesion::report::{PanelExport, ReportRow, ReportTable, RowKind};

fn value() -> impl Strategy<Value = Option<f64>> {
    prop_oneof![Just(None), (0.0f64..=1.0).prop_map(Some), (0u32..=20).prop_map(|k| Some(k as f64 / 20.0))]
}

fn row() -> impl Strategy<Value = ReportRow> {
    ("[a-z+][a-z0-9+_.-]{0,12}", any::<bool>(), proptest::collection::vec(value(), 12)).prop_map(|(name, r, v)| {
        ReportRow {
            name,
            kind: if r { RowKind::Run } else { RowKind::Reference },
            values: v.try_into().unwrap(),
        }
    })
}

proptest! {
    #[test]
    fn parse_inverts_render(rows in proptest::collection::vec(row(), 0..12)) {
        let t = ReportTable { rows };
        let back = ReportTable::parse(&t.render()).unwrap();
        prop_assert_eq!(back, t);
    }
}

#[test]
fn four_ablation_runs_in_preset_order() {
    let dir = tempfile::tempdir().unwrap();
    let panel = |level| MetricPanel { level, roc_auc: 0.9, se: 0.8, sp: 0.7, ppv: 0.6, npv: 0.5, acc: f64::NAN };
    let mut dirs = Vec::new();
    for name in ["+cls+ent", "+ent", "baseline", "+cls"] {
        let d = dir.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        PanelExport { run: name.into(), lesion: panel(Level::Lesion), patient: panel(Level::Patient) }
            .write(&d)
            .unwrap();
        dirs.push(d);
    }
    let t = ReportTable::from_dirs(&dirs).unwrap();
    let runs: Vec<&str> = t.rows.iter().filter(|r| r.kind == RowKind::Run).map(|r| r.name.as_str()).collect();
    assert_eq!(runs, ["baseline", "+cls", "+ent", "+cls+ent"]);
    assert_eq!(t.rows[0].values[5], None);
    let (csv, txt) = t.write(&dir.path().join("out")).unwrap();
    let text = std::fs::read_to_string(txt).unwrap();
    assert!(text.contains("Lesion-Level") && text.contains("Patient-Level"));
    assert_eq!(ReportTable::parse(&text).unwrap(), t);
    let csv = std::fs::read_to_string(csv).unwrap();
    assert!(csv.starts_with("name,kind,lesion_roc_auc,lesion_se"));
    assert_eq!(csv.lines().count(), 1 + t.rows.len());
}
