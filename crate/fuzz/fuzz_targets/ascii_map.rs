#![no_main]
use libfuzzer_sys::fuzz_target;

use goalnav::gridmap::OccupancyGrid;

// Anything that parses must survive a write/read cycle unchanged.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(grid) = OccupancyGrid::parse_ascii(text) else { return };
    let again = OccupancyGrid::parse_ascii(&grid.to_ascii()).expect("serialized map parses");
    assert_eq!(again.cells(), grid.cells());
    assert_eq!((again.width(), again.height()), (grid.width(), grid.height()));
});
