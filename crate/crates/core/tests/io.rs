use std::io::Write;

use compatkit::error::Error;
use compatkit::io::{read_index_list, read_matrix_csv, read_vector_csv};

fn file(contents: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    f
}

#[test]
fn matrices_and_vectors_from_files() {
    let m = file("a,b,c\n1,2,3\n4,5,6\n");
    let x = read_matrix_csv(m.path()).unwrap();
    assert_eq!((x.nrows(), x.ncols()), (2, 3));
    assert_eq!(x[(1, 2)], 6.0);
    assert_eq!(read_vector_csv(file("1\n2\n3\n").path()).unwrap(), vec![1.0, 2.0, 3.0]);
    assert_eq!(read_vector_csv(file("1,2,3\n").path()).unwrap(), vec![1.0, 2.0, 3.0]);
    assert!(matches!(read_vector_csv(m.path()), Err(Error::Parse(_))));
    assert!(matches!(read_matrix_csv(std::path::Path::new("/nonexistent/x.csv")), Err(Error::Io(_))));
}

#[test]
fn index_lists_from_files_and_literals() {
    assert_eq!(read_index_list("3,1,2").unwrap(), vec![3, 1, 2]);
    assert_eq!(read_index_list(file("[4, 9]").path().to_str().unwrap()).unwrap(), vec![4, 9]);
    let est = file(r#"{"active": [2, 5], "sigma_sq_hat": 0.5, "beta_train": [0, 1]}"#);
    assert_eq!(read_index_list(est.path().to_str().unwrap()).unwrap(), vec![2, 5]);
    assert!(read_index_list(file(r#"{"other": 1}"#).path().to_str().unwrap()).is_err());
}
