pub mod grad_cases;
pub mod gradcheck;
pub mod oracles;
