#![no_main]

use jima_core::runner::ResultTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = ResultTable::read_csv(data, "fuzz") {
        let _ = table.render_text();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let back = ResultTable::read_csv(buf.as_slice(), "fuzz").unwrap();
        assert_eq!(table.rows.len(), back.rows.len());
    }
});
