#![no_main]
use libfuzzer_sys::fuzz_target;

use goalnav::gridmap::OccupancyGrid;

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = OccupancyGrid::parse_pgm(data) {
        let again = OccupancyGrid::parse_pgm(&grid.to_pgm()).expect("written raster parses");
        assert_eq!(again.cells(), grid.cells());
    }
});
